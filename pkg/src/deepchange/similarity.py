"""Binary-change similarity estimators.

Produces the per-point flag y_sim (1 = similar/unchanged) that drives the
contrastive loss term, from one of three sources: ground truth, thresholded
cloud-to-cloud nearest distances, or a single-scale normal-oriented cylinder
distance with a statistical significance test (an intentionally reduced
variant of the usual multiscale formulation: fixed scales, z-up fallback when
normal estimation degenerates).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PointCloud, SpatialIndex
from .features import Neighborhood, eigen_features_bulk, _neighbor_flat


@dataclass
class SimilarityMap:
    y_sim: np.ndarray  # (n_pc2,) uint8, 1 = similar/unchanged
    source: str  # ground_truth | c2c_threshold | m3c2
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y_sim = np.asarray(self.y_sim, dtype=np.uint8)


def c2c_distance(pc2: PointCloud, pc1: PointCloud,
                 index1: SpatialIndex = None) -> np.ndarray:
    """Euclidean distance from each pc2 point to its nearest pc1 point."""
    if len(pc1) == 0 or len(pc2) == 0:
        raise ValueError("both clouds must be non-empty")
    index1 = index1 or SpatialIndex(pc1)
    _, d = index1.nearest_batch(pc2.xyz)
    return np.asarray(d, dtype=np.float64)


def m3c2_lite(pc2: PointCloud, pc1: PointCloud, normal_scale: float = 2.5,
              cyl_radius: float = 1.0, cyl_halfdepth: float = 4.0,
              min_points: int = 4, reg_error: float = 0.0,
              confidence_z: float = 1.96):
    """Normal-oriented cylinder distance with significance flag per pc2 point.

    Returns (distances, significant, no_data). A point with fewer than
    `min_points` members in either cylinder gets distance NaN, significant
    False and no_data True.
    """
    if normal_scale <= 0 or cyl_radius <= 0 or cyl_halfdepth <= 0:
        raise ValueError("scales must be > 0")
    idx2 = SpatialIndex(pc2)
    idx1 = SpatialIndex(pc1)
    flat, counts = _neighbor_flat(idx2, pc2.xyz, Neighborhood("radius", normal_scale))
    normals, _, _, _, degenerate = eigen_features_bulk(pc2, flat, counts)
    normals[degenerate] = (0.0, 0.0, 1.0)

    n = len(pc2)
    reach = float(np.sqrt(cyl_radius ** 2 + cyl_halfdepth ** 2))
    ball1 = idx1._tree3d.query_ball_point(pc2.xyz, r=reach)
    ball2 = idx2._tree3d.query_ball_point(pc2.xyz, r=reach)
    distances = np.full(n, np.nan)
    significant = np.zeros(n, dtype=bool)
    no_data = np.zeros(n, dtype=bool)
    r2 = cyl_radius ** 2
    for i in range(n):
        p = pc2.xyz[i]
        nv = normals[i]
        alongs = []
        for cloud, ids in ((pc1, ball1[i]), (pc2, ball2[i])):
            if len(ids) == 0:
                alongs.append(np.empty(0))
                continue
            o = cloud.xyz[np.asarray(ids, dtype=np.int64)] - p
            along = o @ nv
            radial2 = (o ** 2).sum(axis=1) - along ** 2
            inside = (np.abs(along) <= cyl_halfdepth) & (radial2 <= r2)
            alongs.append(along[inside])
        a1, a2 = alongs
        if len(a1) < min_points or len(a2) < min_points:
            no_data[i] = True
            continue
        d = float(a2.mean() - a1.mean())
        distances[i] = d
        spread = np.sqrt(a1.var() / len(a1) + a2.var() / len(a2))
        significant[i] = abs(d) > confidence_z * spread + reg_error
    return distances, significant, no_data


def estimate_ysim(source: str, *, gt_labels=None, c2c=None, c2c_threshold=None,
                  m3c2_significant=None, params=None) -> SimilarityMap:
    """Build a SimilarityMap from one of the supported sources.

    ground_truth: y_sim = 1 iff the class is unchanged (class 0).
    c2c_threshold: y_sim = 1 iff nearest-cloud distance <= threshold.
    m3c2: y_sim = 1 iff the change is not statistically significant.
    """
    params = dict(params or {})
    if source == "ground_truth":
        if gt_labels is None:
            raise ValueError("ground_truth source requires gt_labels")
        y = (np.asarray(gt_labels) == 0).astype(np.uint8)
    elif source == "c2c_threshold":
        if c2c is None or c2c_threshold is None:
            raise ValueError("c2c source requires distances and a threshold")
        y = (np.asarray(c2c) <= float(c2c_threshold)).astype(np.uint8)
        params.setdefault("threshold", float(c2c_threshold))
    elif source == "m3c2":
        if m3c2_significant is None:
            raise ValueError("m3c2 source requires significance flags")
        y = (~np.asarray(m3c2_significant, dtype=bool)).astype(np.uint8)
    else:
        raise ValueError(f"unknown y_sim source {source!r}")
    return SimilarityMap(y, source, params)


def save_similarity(path, sim: SimilarityMap) -> None:
    """One flag per line next to the point file, plus a JSON header."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in sim.y_sim:
            fh.write(f"{int(v)}\n")
    header = {"schema": 1, "source": sim.source, "params": sim.params,
              "n_points": int(len(sim.y_sim))}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2))


def load_similarity(path) -> SimilarityMap:
    path = Path(path)
    flags = np.loadtxt(path, dtype=np.int64).ravel().astype(np.uint8)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if header.get("n_points") != len(flags):
        raise ValueError(f"{path}: header/point count mismatch")
    return SimilarityMap(flags, header["source"], header.get("params", {}))
