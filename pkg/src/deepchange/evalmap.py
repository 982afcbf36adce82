"""Pseudo-cluster to real-class mapping and segmentation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MappingError(ValueError):
    """A pseudo-cluster id has no entry in the mapping."""


@dataclass
class ClassMapping:
    """pseudo-id -> class-id table with provenance per entry."""

    n_classes: int
    entries: dict = field(default_factory=dict)  # id -> (class, provenance, fraction|None)

    def assign(self, cluster: int, cls: int, provenance: str = "user",
               majority_fraction=None):
        if not 0 <= cls < self.n_classes:
            raise ValueError(f"class {cls} out of range")
        if provenance not in ("majority", "user"):
            raise ValueError("provenance must be 'majority' or 'user'")
        self.entries[int(cluster)] = (int(cls), provenance, majority_fraction)

    def class_of(self, cluster: int) -> int:
        try:
            return self.entries[int(cluster)][0]
        except KeyError:
            raise MappingError(f"cluster {cluster} is unmapped") from None

    def lookup_table(self, k: int) -> np.ndarray:
        table = np.full(k, -1, dtype=np.int32)
        for cid, (cls, _, _) in self.entries.items():
            if 0 <= cid < k:
                table[cid] = cls
        return table

    def to_json(self) -> str:
        return json.dumps({
            "schema": 1,
            "n_classes": self.n_classes,
            "entries": [
                {"cluster": cid, "class": cls, "provenance": prov,
                 **({"majority_fraction": frac} if frac is not None else {})}
                for cid, (cls, prov, frac) in sorted(self.entries.items())
            ],
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "ClassMapping":
        doc = json.loads(text)
        if doc.get("schema") != 1:
            raise ValueError("unsupported mapping schema")
        m = ClassMapping(int(doc["n_classes"]))
        for e in doc["entries"]:
            m.assign(int(e["cluster"]), int(e["class"]),
                     e.get("provenance", "user"), e.get("majority_fraction"))
        return m


def majority_map(assignments, true_labels, k: int, n_classes: int) -> ClassMapping:
    """Map every pseudo-cluster to its most frequent true class.

    Ties break toward the lowest class id; clusters with no points map to
    class 0 with a zero majority fraction (flagged for attention).
    """
    a = np.asarray(assignments, dtype=np.int64)
    t = np.asarray(true_labels, dtype=np.int64)
    if len(a) != len(t):
        raise ValueError("assignments and labels must have equal length")
    if len(a) and a.max() >= k:
        raise ValueError("assignment id out of range")
    hist = np.zeros((k, n_classes), dtype=np.int64)
    np.add.at(hist, (a, t), 1)
    mapping = ClassMapping(n_classes)
    for cid in range(k):
        total = hist[cid].sum()
        if total == 0:
            mapping.assign(cid, 0, "majority", 0.0)
            continue
        cls = int(np.argmax(hist[cid]))  # argmax takes the lowest id on ties
        mapping.assign(cid, cls, "majority", float(hist[cid, cls] / total))
    return mapping


def apply_mapping(assignments, mapping: ClassMapping) -> np.ndarray:
    a = np.asarray(assignments, dtype=np.int64)
    if len(a) == 0:
        return np.zeros(0, dtype=np.int32)
    table = mapping.lookup_table(int(a.max()) + 1)
    out = table[a]
    if (out < 0).any():
        missing = sorted(np.unique(a[out < 0]).tolist())
        raise MappingError(f"unmapped cluster ids: {missing}")
    return out.astype(np.int32)


@dataclass
class MetricsReport:
    confusion: np.ndarray  # (n_classes, n_classes), rows = truth
    iou: np.ndarray  # per class
    m_acc: float
    m_iou_change: float
    change_class_ids: tuple

    def to_json(self) -> str:
        return json.dumps({
            "schema": 1,
            "confusion": self.confusion.tolist(),
            "iou": [float(v) for v in self.iou],
            "mAcc": self.m_acc,
            "mIoU_ch": self.m_iou_change,
            "change_class_ids": list(self.change_class_ids),
        }, indent=2)


def metrics(pred_labels, true_labels, n_classes: int,
            change_class_ids) -> MetricsReport:
    """Confusion matrix, per-class IoU, mAcc and mean IoU over change classes.

    mAcc averages recall over classes that actually occur in the truth;
    mIoU_ch averages IoU over `change_class_ids` only.
    """
    p = np.asarray(pred_labels, dtype=np.int64)
    t = np.asarray(true_labels, dtype=np.int64)
    if len(p) != len(t):
        raise ValueError("label vectors must have equal length")
    if len(p) == 0:
        raise ValueError("cannot score empty label vectors")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    diag = np.diag(conf).astype(np.float64)
    rows = conf.sum(axis=1).astype(np.float64)
    cols = conf.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    iou = np.where(union > 0, diag / np.maximum(union, 1), 0.0)
    support = rows > 0
    m_acc = float((diag[support] / rows[support]).mean()) if support.any() else 0.0
    ch = tuple(int(c) for c in change_class_ids)
    m_iou_ch = float(iou[list(ch)].mean()) if ch else 0.0
    return MetricsReport(conf, iou, m_acc, m_iou_ch, ch)


def binary_collapse(pred_labels, true_labels) -> MetricsReport:
    """Collapse every non-zero class to 'changed' and score the binary task."""
    p = (np.asarray(pred_labels) != 0).astype(np.int64)
    t = (np.asarray(true_labels) != 0).astype(np.int64)
    return metrics(p, t, 2, change_class_ids=(1,))


def format_table(report: MetricsReport, class_names) -> str:
    """Plain-text layout: mAcc / mIoU_ch header plus per-class IoU rows."""
    lines = [
        f"{'metric':<24}{'value':>10}",
        f"{'mAcc (%)':<24}{100.0 * report.m_acc:>10.2f}",
        f"{'mIoU_ch (%)':<24}{100.0 * report.m_iou_change:>10.2f}",
        "",
        f"{'class':<24}{'IoU (%)':>10}{'support':>10}",
    ]
    rows = report.confusion.sum(axis=1)
    for i, name in enumerate(class_names):
        lines.append(f"{name:<24}{100.0 * report.iou[i]:>10.2f}{rows[i]:>10d}")
    return "\n".join(lines) + "\n"
