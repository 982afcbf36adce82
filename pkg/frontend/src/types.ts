/** Shapes of the JSON payloads exchanged with the labeling API. */

export interface ClusterSummary {
  id: number;
  count: number;
  label: number | null;
  provenance: string | null;
  mean_height: number;
  spread: number;
}

export interface ClassInfo {
  id: number;
  name: string;
  color: string;
}

export interface PointsPayload {
  cluster: number;
  count: number;
  points: number[]; // flat [x, y, z, ...]
  context: number[]; // flat [x, y, z, ...]
}

export interface MappingEntry {
  cluster: number;
  class: number;
}

export interface ProgressInfo {
  labeled: number;
  total: number;
}

export interface SubmitBlocked {
  detail: string;
  missing: number[];
}

export type SortMode = "size" | "spread" | "unlabeled_first";
