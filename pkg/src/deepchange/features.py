"""Handcrafted per-point features for bi-temporal clouds.

Ten columns per point, fixed order: unit normal (nx, ny, nz), the eigenvalue
shape features linearity / planarity / omnivariance, vertical rank and
elevation range within the neighborhood, height above the local ground model,
and the cross-epoch stability ratio. The same columns serve as network input
and as the feature space of the k-means baseline.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import PointCloud, SpatialIndex

FEATURE_NAMES = (
    "nx", "ny", "nz",
    "linearity", "planarity", "omnivariance",
    "vertical_rank", "elevation_range", "normalized_height",
    "stability",
)
N_FEATURES = len(FEATURE_NAMES)

_CACHE_MAGIC = b"DCFT"
_CACHE_VERSION = 1


class DtmExtentError(ValueError):
    """Queried point lies outside the ground model's footprint."""


@dataclass
class Neighborhood:
    """Neighborhood rule: kind is 'radius' (meters) or 'knn' (count)."""

    kind: str = "radius"
    value: float = 2.5

    def __post_init__(self):
        if self.kind not in ("radius", "knn"):
            raise ValueError("neighborhood kind must be 'radius' or 'knn'")
        if self.value <= 0:
            raise ValueError("neighborhood size must be > 0")


@dataclass
class FeatureParams:
    neighborhood: Neighborhood = None
    dtm_cell: float = 5.0
    stability_radius: float = None

    def __post_init__(self):
        if self.neighborhood is None:
            self.neighborhood = Neighborhood()
        if self.stability_radius is None:
            self.stability_radius = (
                self.neighborhood.value if self.neighborhood.kind == "radius" else 2.5
            )


class DtmGrid:
    """Per-cell ground elevation: minimum z, empty cells filled by nearest
    occupied cell (ties toward the lexicographically smallest cell index)."""

    def __init__(self, origin, cell: float, elevations: np.ndarray):
        self.origin = (float(origin[0]), float(origin[1]))
        self.cell = float(cell)
        self.elevations = np.asarray(elevations, dtype=np.float64)

    def cell_index(self, xy):
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        ix = np.floor((xy[:, 0] - self.origin[0]) / self.cell).astype(np.int64)
        iy = np.floor((xy[:, 1] - self.origin[1]) / self.cell).astype(np.int64)
        nx, ny = self.elevations.shape
        # Points sitting exactly on the upper boundary belong to the last cell.
        ix[(ix == nx) & np.isclose(xy[:, 0], self.origin[0] + nx * self.cell)] = nx - 1
        iy[(iy == ny) & np.isclose(xy[:, 1], self.origin[1] + ny * self.cell)] = ny - 1
        if np.any((ix < 0) | (ix >= nx) | (iy < 0) | (iy >= ny)):
            raise DtmExtentError("point outside DTM extent")
        return ix, iy

    def elevation_at(self, xy) -> np.ndarray:
        ix, iy = self.cell_index(xy)
        return self.elevations[ix, iy]


def build_dtm(pc: PointCloud, cell: float) -> DtmGrid:
    """Rasterize the cloud at ground level: per-cell minimum z."""
    if cell <= 0:
        raise ValueError("cell must be > 0")
    if len(pc) == 0:
        raise ValueError("cannot build a DTM from an empty cloud")
    ox, oy = pc.xyz[:, 0].min(), pc.xyz[:, 1].min()
    nx = int(np.floor((pc.xyz[:, 0].max() - ox) / cell)) + 1
    ny = int(np.floor((pc.xyz[:, 1].max() - oy) / cell)) + 1
    ix = np.minimum(np.floor((pc.xyz[:, 0] - ox) / cell).astype(np.int64), nx - 1)
    iy = np.minimum(np.floor((pc.xyz[:, 1] - oy) / cell).astype(np.int64), ny - 1)
    elev = np.full((nx, ny), np.inf)
    np.minimum.at(elev, (ix, iy), pc.xyz[:, 2])

    empty = ~np.isfinite(elev)
    if empty.any():
        occ_idx = np.argwhere(~empty)
        emp_idx = np.argwhere(empty)
        occ_centers = (occ_idx + 0.5) * cell
        emp_centers = (emp_idx + 0.5) * cell
        from scipy.spatial import cKDTree

        tree = cKDTree(occ_centers)
        d, _ = tree.query(emp_centers)
        for row, (ci, dist) in enumerate(zip(emp_idx, d)):
            cand = tree.query_ball_point(emp_centers[row], r=np.nextafter(dist, np.inf))
            cells = occ_idx[sorted(cand)]
            best = min(map(tuple, cells))
            elev[tuple(ci)] = elev[best]
    return DtmGrid((ox, oy), cell, elev)


def _neighbor_flat(index: SpatialIndex, xyz: np.ndarray, neighborhood: Neighborhood):
    """Neighbor ids for every query point, flattened with per-point counts."""
    if neighborhood.kind == "knn":
        ids, _ = index.knn_batch(xyz, int(neighborhood.value))
        counts = np.full(len(xyz), ids.shape[1], dtype=np.int64)
        return ids.ravel(), counts
    lists = index._tree3d.query_ball_point(xyz, r=neighborhood.value)
    counts = np.array([len(l) for l in lists], dtype=np.int64)
    flat = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists]) if counts.sum() else np.empty(0, np.int64)
    return flat, counts


def eigen_features_bulk(pc: PointCloud, flat_ids, counts):
    """Covariance eigen-features for every point of `pc`.

    Returns (normals (n,3), linearity, planarity, omnivariance, degenerate)
    where degenerate marks neighborhoods with < 3 points or a zero largest
    eigenvalue; those rows carry the zero-feature sentinel and normal (0,0,1).
    """
    n = len(counts)
    owners = np.repeat(np.arange(n), counts)
    nbr_xyz = pc.xyz[flat_ids]
    s1 = np.zeros((n, 3))
    for a in range(3):
        s1[:, a] = np.bincount(owners, weights=nbr_xyz[:, a], minlength=n)
    safe_counts = np.maximum(counts, 1)
    mean = s1 / safe_counts[:, None]
    cov = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s2 = np.bincount(owners, weights=nbr_xyz[:, a] * nbr_xyz[:, b], minlength=n)
            c = s2 / safe_counts - mean[:, a] * mean[:, b]
            cov[:, a, b] = c
            cov[:, b, a] = c

    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    evals = np.maximum(evals, 0.0)
    # Snap eigenvalues that are pure roundoff to zero: cbrt in omnivariance
    # would otherwise amplify ~1e-16 noise into feature-level jitter.
    lam_top = evals[:, 2:3]
    evals = np.where(evals < 1e-9 * np.maximum(lam_top, 1e-300), 0.0, evals)
    lam1, lam2, lam3 = evals[:, 2], evals[:, 1], evals[:, 0]
    degenerate = (counts < 3) | (lam1 <= 1e-12)
    lam1_safe = np.where(degenerate, 1.0, lam1)
    linearity = np.where(degenerate, 0.0, (lam1 - lam2) / lam1_safe)
    planarity = np.where(degenerate, 0.0, (lam2 - lam3) / lam1_safe)
    omnivariance = np.where(degenerate, 0.0, np.cbrt(lam1 * lam2 * lam3))

    normals = evecs[:, :, 0].copy()
    flip = normals[:, 2] < 0
    eq = normals[:, 2] == 0
    flip |= eq & (normals[:, 0] < 0)
    flip |= eq & (normals[:, 0] == 0) & (normals[:, 1] < 0)
    normals[flip] *= -1.0
    normals[degenerate] = (0.0, 0.0, 1.0)
    nrm = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(nrm == 0, 1.0, nrm)
    return normals, linearity, planarity, omnivariance, degenerate


def height_features_bulk(pc: PointCloud, flat_ids, counts, dtm: DtmGrid):
    n = len(counts)
    owners = np.repeat(np.arange(n), counts)
    z_nbr = pc.xyz[flat_ids, 2]
    z_own = pc.xyz[owners, 2]
    below = np.bincount(owners, weights=(z_nbr <= z_own).astype(np.float64), minlength=n)
    vertical_rank = below / np.maximum(counts, 1)
    zmax = np.full(n, -np.inf)
    zmin = np.full(n, np.inf)
    np.maximum.at(zmax, owners, z_nbr)
    np.minimum.at(zmin, owners, z_nbr)
    elevation_range = np.where(counts > 0, zmax - zmin, 0.0)
    normalized_height = pc.xyz[:, 2] - dtm.elevation_at(pc.xyz[:, :2])
    return vertical_rank, elevation_range, normalized_height


def stability_bulk(pc_self: PointCloud, index_self: SpatialIndex,
                   index_other: SpatialIndex, radius: float) -> np.ndarray:
    """Own-epoch over other-epoch neighbor counts inside a fixed ball."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    own = index_self.count_within_batch(pc_self.xyz, radius)
    other = index_other.count_within_batch(pc_self.xyz, radius)
    return own / np.maximum(other, 1)


def eigen_features(pc: PointCloud, point_id: int, neighborhood: Neighborhood,
                   index: SpatialIndex = None):
    """Single-point eigen features: (normal, linearity, planarity, omnivariance, degenerate)."""
    index = index or SpatialIndex(pc)
    flat, counts = _neighbor_flat(index, pc.xyz[point_id:point_id + 1], neighborhood)
    normals, lin, plan, omni, deg = eigen_features_bulk(pc, flat, counts)
    return normals[0], float(lin[0]), float(plan[0]), float(omni[0]), bool(deg[0])


def height_features(pc: PointCloud, point_id: int, neighborhood: Neighborhood,
                    dtm: DtmGrid, index: SpatialIndex = None):
    index = index or SpatialIndex(pc)
    flat, counts = _neighbor_flat(index, pc.xyz[point_id:point_id + 1], neighborhood)
    if counts[0] == 0:
        raise ValueError("empty neighborhood")
    z_nbr = pc.xyz[flat, 2]
    vr = float((z_nbr <= pc.xyz[point_id, 2]).sum() / counts[0])
    er = float(z_nbr.max() - z_nbr.min())
    nh = float(pc.xyz[point_id, 2] - dtm.elevation_at(pc.xyz[point_id:point_id + 1, :2])[0])
    return vr, er, nh


def stability(pc_self: PointCloud, pc_other: PointCloud, point_id: int,
              radius: float) -> float:
    if radius <= 0:
        raise ValueError("radius must be > 0")
    p = pc_self.xyz[point_id]
    own = len(SpatialIndex(pc_self).radius_query_3d(p, radius))
    other = len(SpatialIndex(pc_other).radius_query_3d(p, radius)) if len(pc_other) else 0
    return own / max(other, 1)


class FeatureSet:
    """Raw feature matrices for both epochs plus shared standardization."""

    def __init__(self, raw1: np.ndarray, raw2: np.ndarray, mean, std,
                 degenerate1=None, degenerate2=None):
        self.raw1 = raw1.astype(np.float32)
        self.raw2 = raw2.astype(np.float32)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.degenerate1 = degenerate1
        self.degenerate2 = degenerate2

    def transform(self, raw: np.ndarray) -> np.ndarray:
        return ((raw.astype(np.float64) - self.mean) / self.std).astype(np.float32)

    def standardized(self, epoch: int) -> np.ndarray:
        return self.transform(self.raw1 if epoch == 1 else self.raw2)

    def scaler_json(self) -> str:
        return json.dumps({
            "schema": 1,
            "columns": list(FEATURE_NAMES),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }, indent=2)

    @staticmethod
    def fit_scaler(rows: np.ndarray):
        rows = rows.astype(np.float64)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return mean, std


def compute_for_cloud(pc: PointCloud, other: PointCloud, params: FeatureParams,
                      index: SpatialIndex = None, other_index: SpatialIndex = None,
                      dtm: DtmGrid = None, dtype=np.float32):
    """Ten raw feature columns for every point of `pc` against `other`.

    Internals run in float64; `dtype` controls only the returned matrix
    (float64 available for the tight invariance checks).
    """
    index = index or SpatialIndex(pc)
    other_index = other_index or SpatialIndex(other)
    dtm = dtm or build_dtm(pc, params.dtm_cell)
    flat, counts = _neighbor_flat(index, pc.xyz, params.neighborhood)
    normals, lin, plan, omni, deg = eigen_features_bulk(pc, flat, counts)
    vr, er, nh = height_features_bulk(pc, flat, counts, dtm)
    stab = stability_bulk(pc, index, other_index, params.stability_radius)
    raw = np.column_stack([
        normals[:, 0], normals[:, 1], normals[:, 2],
        lin, plan, omni, vr, er, nh, stab,
    ]).astype(dtype)
    return raw, deg


def compute_all(pc1: PointCloud, pc2: PointCloud,
                params: FeatureParams = None) -> FeatureSet:
    """Feature matrices for both clouds; scaler fitted on their union."""
    params = params or FeatureParams()
    idx1, idx2 = SpatialIndex(pc1), SpatialIndex(pc2)
    raw1, deg1 = compute_for_cloud(pc1, pc2, params, idx1, idx2)
    raw2, deg2 = compute_for_cloud(pc2, pc1, params, idx2, idx1)
    mean, std = FeatureSet.fit_scaler(np.concatenate([raw1, raw2], axis=0))
    return FeatureSet(raw1, raw2, mean, std, deg1, deg2)


def write_feature_cache(path, matrix: np.ndarray) -> None:
    """Binary cache: magic, version u32, n_points u64, n_feats u32, f32 rows."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IQI", _CACHE_VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())


def read_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache")
        version, n_points, n_feats = struct.unpack("<IQI", fh.read(16))
        if version != _CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n_points * n_feats:
        raise ValueError(f"{path}: truncated feature cache")
    return data.reshape(n_points, n_feats).copy()


def write_scaler(path, fs: FeatureSet) -> None:
    Path(path).write_text(fs.scaler_json())


def read_scaler(path):
    doc = json.loads(Path(path).read_text())
    return np.asarray(doc["mean"]), np.asarray(doc["std"])
