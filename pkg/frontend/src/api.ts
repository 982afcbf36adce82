/** Thin fetch wrappers over the labeling HTTP API (same origin). */

import type {
  ClassInfo,
  ClusterSummary,
  MappingEntry,
  PointsPayload,
  ProgressInfo,
} from "./types.js";

async function getJson<T>(path: string): Promise<T> {
  const resp = await fetch(path);
  if (!resp.ok) throw new Error(`GET ${path}: ${resp.status}`);
  return (await resp.json()) as T;
}

export function fetchClusters(): Promise<ClusterSummary[]> {
  return getJson("/api/clusters");
}

export async function fetchClasses(): Promise<ClassInfo[]> {
  const doc = await getJson<{ classes: ClassInfo[] }>("/api/classes");
  return doc.classes;
}

export function fetchPoints(id: number, limit = 20000): Promise<PointsPayload> {
  return getJson(`/api/clusters/${id}/points?limit=${limit}`);
}

export function fetchProgress(): Promise<ProgressInfo> {
  return getJson("/api/progress");
}

export async function postMapping(entries: MappingEntry[]): Promise<void> {
  const resp = await fetch("/api/mapping", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ entries }),
  });
  if (!resp.ok) {
    const body = await resp.json().catch(() => ({ detail: resp.statusText }));
    throw new Error(body.detail ?? `POST /api/mapping: ${resp.status}`);
  }
}

export interface SubmitResult {
  ok: boolean;
  missing?: number[];
  metrics?: unknown;
}

export async function postSubmit(): Promise<SubmitResult> {
  const resp = await fetch("/api/submit", { method: "POST", body: "{}" });
  const body = await resp.json();
  if (resp.status === 409) return { ok: false, missing: body.missing };
  if (!resp.ok) throw new Error(body.detail ?? `POST /api/submit: ${resp.status}`);
  return { ok: true, metrics: body };
}
