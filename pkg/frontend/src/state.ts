/**
 * Pure client-side state logic: card ordering, optimistic label assignment
 * with rollback, progress accounting, submit validation and point-budget
 * decimation. No DOM access here so everything is unit-testable.
 */

import type { ClusterSummary, MappingEntry, SortMode } from "./types.js";

/** Hard cap on simultaneously rendered points. */
export const MAX_VISIBLE_POINTS = 100_000;

export function orderCards(
  cards: readonly ClusterSummary[],
  mode: SortMode,
): ClusterSummary[] {
  const out = [...cards];
  switch (mode) {
    case "size":
      out.sort((a, b) => b.count - a.count || a.id - b.id);
      break;
    case "spread":
      // Spatially spread clusters tend to mix classes: a cheap purity proxy.
      out.sort((a, b) => b.spread - a.spread || a.id - b.id);
      break;
    case "unlabeled_first":
      out.sort((a, b) => {
        const ua = a.label === null ? 0 : 1;
        const ub = b.label === null ? 0 : 1;
        return ua - ub || b.count - a.count || a.id - b.id;
      });
      break;
  }
  return out;
}

export function assignLabel(
  cards: readonly ClusterSummary[],
  id: number,
  cls: number,
): { next: ClusterSummary[]; previous: number | null } {
  const card = cards.find((c) => c.id === id);
  if (card === undefined) throw new Error(`unknown cluster id ${id}`);
  const previous = card.label;
  const next = cards.map((c) =>
    c.id === id ? { ...c, label: cls, provenance: "user" } : c,
  );
  return { next, previous };
}

export function rollbackLabel(
  cards: readonly ClusterSummary[],
  id: number,
  previous: number | null,
): ClusterSummary[] {
  return cards.map((c) => (c.id === id ? { ...c, label: previous } : c));
}

export function progressOf(cards: readonly ClusterSummary[]): {
  labeled: number;
  total: number;
} {
  return {
    labeled: cards.filter((c) => c.label !== null).length,
    total: cards.length,
  };
}

export function missingIds(cards: readonly ClusterSummary[]): number[] {
  return cards
    .filter((c) => c.label === null)
    .map((c) => c.id)
    .sort((a, b) => a - b);
}

export function mappingEntries(
  cards: readonly ClusterSummary[],
): MappingEntry[] {
  return cards
    .filter((c) => c.label !== null)
    .map((c) => ({ cluster: c.id, class: c.label as number }))
    .sort((a, b) => a.cluster - b.cluster);
}

/**
 * Stride for client-side decimation so cluster + context stay within the
 * visible-point budget. Returns 1 (keep everything) when under budget.
 */
export function decimationStride(totalPoints: number): number {
  if (totalPoints <= MAX_VISIBLE_POINTS) return 1;
  return Math.ceil(totalPoints / MAX_VISIBLE_POINTS);
}

export function decimateFlat(flat: readonly number[], stride: number): Float32Array {
  if (stride <= 1) return Float32Array.from(flat);
  const n = Math.floor(flat.length / 3);
  const kept = Math.ceil(n / stride);
  const out = new Float32Array(kept * 3);
  let w = 0;
  for (let i = 0; i < n; i += stride) {
    out[w++] = flat[i * 3];
    out[w++] = flat[i * 3 + 1];
    out[w++] = flat[i * 3 + 2];
  }
  return out;
}

/** Height-ramp fallback palette (blue -> green -> red over [zmin, zmax]). */
export function heightColor(z: number, zmin: number, zmax: number): [number, number, number] {
  const t = zmax > zmin ? Math.min(1, Math.max(0, (z - zmin) / (zmax - zmin))) : 0;
  if (t < 0.5) {
    const u = t * 2;
    return [0.1 * u, 0.3 + 0.5 * u, 0.9 - 0.6 * u];
  }
  const u = (t - 0.5) * 2;
  return [0.1 + 0.8 * u, 0.8 - 0.5 * u, 0.3 - 0.2 * u];
}

/** Next/previous card id for keyboard navigation within the current order. */
export function neighborCard(
  ordered: readonly ClusterSummary[],
  currentId: number | null,
  step: 1 | -1,
): number | null {
  if (ordered.length === 0) return null;
  if (currentId === null) return ordered[0].id;
  const idx = ordered.findIndex((c) => c.id === currentId);
  if (idx < 0) return ordered[0].id;
  const next = Math.min(ordered.length - 1, Math.max(0, idx + step));
  return ordered[next].id;
}
