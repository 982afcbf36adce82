/** Entry point: wires the card list, viewer, class palette and submit flow. */

import {
  fetchClasses,
  fetchClusters,
  fetchPoints,
  postMapping,
  postSubmit,
} from "./api.js";
import {
  assignLabel,
  decimateFlat,
  decimationStride,
  mappingEntries,
  missingIds,
  neighborCard,
  orderCards,
  progressOf,
  rollbackLabel,
} from "./state.js";
import type { ClassInfo, ClusterSummary, SortMode } from "./types.js";
import { ClusterViewer } from "./viewer.js";

let cards: ClusterSummary[] = [];
let classes: ClassInfo[] = [];
let sortMode: SortMode = "unlabeled_first";
let currentId: number | null = null;
let viewer: ClusterViewer;

const $ = (id: string) => document.getElementById(id) as HTMLElement;

function classOf(id: number | null): ClassInfo | null {
  if (id === null) return null;
  return classes.find((c) => c.id === id) ?? null;
}

function renderCards(): void {
  const list = $("cards");
  list.innerHTML = "";
  for (const card of orderCards(cards, sortMode)) {
    const el = document.createElement("div");
    el.className = "card" + (card.id === currentId ? " selected" : "");
    const cls = classOf(card.label);
    el.innerHTML = `
      <span class="swatch" style="background:${cls ? cls.color : "#333a46"}"></span>
      <span class="cid">#${card.id}</span>
      <span class="count">${card.count.toLocaleString()} pts</span>
      <span class="label">${cls ? cls.name : "unlabeled"}</span>`;
    el.onclick = () => selectCluster(card.id);
    list.appendChild(el);
  }
  const p = progressOf(cards);
  $("progress-text").textContent = `${p.labeled} / ${p.total} labeled`;
  ($("progress-fill") as HTMLElement).style.width =
    p.total ? `${(100 * p.labeled) / p.total}%` : "0";
}

function renderPalette(): void {
  const pal = $("palette");
  pal.innerHTML = "";
  classes.forEach((cls, i) => {
    const btn = document.createElement("button");
    btn.className = "class-btn";
    btn.innerHTML = `<span class="swatch" style="background:${cls.color}"></span>
      ${i}: ${cls.name}`;
    btn.onclick = () => assign(cls.id);
    pal.appendChild(btn);
  });
}

async function selectCluster(id: number): Promise<void> {
  currentId = id;
  renderCards();
  const payload = await fetchPoints(id);
  const total = (payload.points.length + payload.context.length) / 3;
  const stride = decimationStride(total);
  const cluster = decimateFlat(payload.points, stride);
  const context = decimateFlat(payload.context, stride);
  const cls = classOf(cards.find((c) => c.id === id)?.label ?? null);
  viewer.showCluster(cluster, context, cls ? cls.color : null);
  $("cluster-info").textContent =
    `cluster #${id} - ${payload.count.toLocaleString()} points` +
    (stride > 1 ? ` (showing 1/${stride})` : "") +
    (context.length === 0 ? " - no co-located context" : "");
}

async function assign(clsId: number): Promise<void> {
  if (currentId === null) return;
  const { next, previous } = assignLabel(cards, currentId, clsId);
  cards = next; // optimistic
  renderCards();
  const cls = classOf(clsId);
  if (cls) viewer.recolor(cls.color);
  try {
    await postMapping([{ cluster: currentId, class: clsId }]);
  } catch (err) {
    cards = rollbackLabel(cards, currentId, previous);
    renderCards();
    setStatus(`assignment failed: ${(err as Error).message}`, true);
  }
}

function setStatus(text: string, isError = false): void {
  const el = $("status");
  el.textContent = text;
  el.className = isError ? "error" : "";
}

async function submit(): Promise<void> {
  const missing = missingIds(cards);
  if (missing.length > 0) {
    setStatus(
      `cannot submit: ${missing.length} unlabeled clusters (${missing
        .slice(0, 12)
        .join(", ")}${missing.length > 12 ? ", ..." : ""})`,
      true,
    );
    return;
  }
  await postMapping(mappingEntries(cards));
  const result = await postSubmit();
  if (!result.ok) {
    setStatus(`server rejected submit; missing ${result.missing?.join(", ")}`, true);
    return;
  }
  const doc = result.metrics as {
    multiclass?: { mAcc: number; mIoU_ch: number };
    note?: string;
  };
  if (doc.multiclass) {
    setStatus(
      `submitted - mAcc ${(100 * doc.multiclass.mAcc).toFixed(2)}%, ` +
      `mIoU_ch ${(100 * doc.multiclass.mIoU_ch).toFixed(2)}%`,
    );
  } else {
    setStatus(doc.note ?? "submitted");
  }
}

function onKey(ev: KeyboardEvent): void {
  if (ev.key === "ArrowDown" || ev.key === "j") {
    const next = neighborCard(orderCards(cards, sortMode), currentId, 1);
    if (next !== null) void selectCluster(next);
  } else if (ev.key === "ArrowUp" || ev.key === "k") {
    const prev = neighborCard(orderCards(cards, sortMode), currentId, -1);
    if (prev !== null) void selectCluster(prev);
  } else if (ev.key >= "0" && ev.key <= "9") {
    const cls = Number(ev.key);
    if (cls < classes.length) void assign(cls);
  } else if (ev.key === "c") {
    const visible = viewer.toggleContext();
    setStatus(`context layer ${visible ? "shown" : "hidden"}`);
  }
}

async function start(): Promise<void> {
  const canvas = $("viewport") as HTMLCanvasElement;
  viewer = new ClusterViewer(canvas);
  const fit = () => viewer.resize(canvas.clientWidth, canvas.clientHeight);
  window.addEventListener("resize", fit);

  [cards, classes] = await Promise.all([fetchClusters(), fetchClasses()]);
  renderPalette();
  renderCards();
  fit();

  ($("sort-mode") as HTMLSelectElement).onchange = (ev) => {
    sortMode = (ev.target as HTMLSelectElement).value as SortMode;
    renderCards();
  };
  $("submit-btn").onclick = () => void submit();
  $("context-btn").onclick = () => {
    const visible = viewer.toggleContext();
    setStatus(`context layer ${visible ? "shown" : "hidden"}`);
  };
  window.addEventListener("keydown", onKey);

  const first = neighborCard(orderCards(cards, sortMode), null, 1);
  if (first !== null) void selectCluster(first);
}

void start();
