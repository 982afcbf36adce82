"""Point cloud representation, ASCII I/O, grid subsampling and spatial queries.

Everything downstream (features, similarity, training, evaluation) works on
the `PointCloud` container defined here. Coordinates are float64 meters;
per-point labels are small non-negative integers; per-point features are a
float32 matrix with one row per point.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class XyzParseError(ValueError):
    """A line of an ASCII point file could not be parsed."""


class XyzFormatError(ValueError):
    """Structurally inconsistent ASCII point file (e.g. mixed label columns)."""


@dataclass(frozen=True)
class Point:
    """A single 3D point, coordinates in meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.z)):
            raise ValueError("point coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


class PointCloud:
    """One epoch of points with optional per-point labels and features.

    Parameters
    ----------
    xyz : (n, 3) float array of positions.
    labels : optional (n,) int array of class ids.
    features : optional (n, f) float32 matrix.
    epoch_tag : 1 or 2, which acquisition this cloud belongs to.
    """

    def __init__(self, xyz, labels=None, features=None, epoch_tag: int = 1):
        xyz = np.asarray(xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (n, 3), got {xyz.shape}")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("coordinates must be finite")
        self.xyz = xyz
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int32)
            if labels.shape != (len(xyz),):
                raise ValueError("labels must have one entry per point")
        self.labels = labels
        if features is not None:
            features = np.asarray(features, dtype=np.float32)
            if features.ndim != 2 or features.shape[0] != len(xyz):
                raise ValueError("features must have one row per point")
            if not np.all(np.isfinite(features)):
                raise ValueError("feature values must be finite")
        self.features = features
        if epoch_tag not in (1, 2):
            raise ValueError("epoch_tag must be 1 or 2")
        self.epoch_tag = epoch_tag

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def n_points(self) -> int:
        return len(self.xyz)

    def point(self, i: int) -> Point:
        x, y, z = self.xyz[i]
        return Point(float(x), float(y), float(z))

    def select(self, ids) -> "PointCloud":
        """Sub-cloud of the given point ids (labels/features carried along)."""
        ids = np.asarray(ids, dtype=np.int64)
        return PointCloud(
            self.xyz[ids],
            None if self.labels is None else self.labels[ids],
            None if self.features is None else self.features[ids],
            epoch_tag=self.epoch_tag,
        )

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.xyz, labels, self.features, self.epoch_tag)

    def with_features(self, features) -> "PointCloud":
        return PointCloud(self.xyz, self.labels, features, self.epoch_tag)


def load_xyz(path, epoch_tag: int = 1) -> PointCloud:
    """Load an ASCII point file: one "x y z [label]" line per point.

    Comment lines starting with '#' and blank lines are skipped. Either every
    data line carries a label column or none does; mixing raises
    XyzFormatError. A malformed value raises XyzParseError with the 1-based
    line number.
    """
    path = Path(path)
    coords = []
    labels = []
    n_cols = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) not in (3, 4):
                raise XyzParseError(
                    f"{path}:{lineno}: expected 3 or 4 columns, got {len(parts)}"
                )
            if n_cols is None:
                n_cols = len(parts)
            elif len(parts) != n_cols:
                raise XyzFormatError(
                    f"{path}:{lineno}: mixed labeled/unlabeled lines"
                )
            try:
                coords.append((float(parts[0]), float(parts[1]), float(parts[2])))
            except ValueError:
                raise XyzParseError(f"{path}:{lineno}: malformed coordinate") from None
            if n_cols == 4:
                try:
                    labels.append(int(parts[3]))
                except ValueError:
                    raise XyzParseError(f"{path}:{lineno}: malformed label") from None
    xyz = np.array(coords, dtype=np.float64).reshape(-1, 3)
    lab = np.array(labels, dtype=np.int32) if n_cols == 4 else None
    return PointCloud(xyz, labels=lab, epoch_tag=epoch_tag)


def save_xyz(pc: PointCloud, path) -> None:
    """Write "%.9g %.9g %.9g[ %d]" lines, LF-terminated, UTF-8."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if pc.labels is None:
            for x, y, z in pc.xyz:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        else:
            for (x, y, z), c in zip(pc.xyz, pc.labels):
                fh.write(f"{x:.9g} {y:.9g} {z:.9g} {int(c)}\n")


def _voxel_keys(xyz: np.ndarray, dl: float) -> np.ndarray:
    # Absolute grid anchored at the origin so re-subsampling at the same dl
    # sees the same partition (idempotence).
    return np.floor(xyz / dl).astype(np.int64)


def grid_subsample(pc: PointCloud, dl: float) -> PointCloud:
    """Voxel-grid subsample: one centroid per occupied cubic voxel of side dl.

    Labels, when present, are reduced to the per-voxel majority (ties toward
    the lowest class id). Features are dropped: they refer to the original
    points and must be recomputed at the new resolution.
    """
    if dl <= 0:
        raise ValueError("dl must be > 0")
    if len(pc) == 0:
        return PointCloud(pc.xyz.copy(), epoch_tag=pc.epoch_tag)
    keys = _voxel_keys(pc.xyz, dl)
    kmin = keys.min(axis=0)
    span = keys.max(axis=0) - kmin + 1
    packed = (
        (keys[:, 0] - kmin[0]) * (span[1] * span[2])
        + (keys[:, 1] - kmin[1]) * span[2]
        + (keys[:, 2] - kmin[2])
    )
    uniq, inverse, counts = np.unique(packed, return_inverse=True, return_counts=True)
    centroids = np.zeros((len(uniq), 3), dtype=np.float64)
    for axis in range(3):
        centroids[:, axis] = np.bincount(
            inverse, weights=pc.xyz[:, axis], minlength=len(uniq)
        )
    centroids /= counts[:, None]

    maj = None
    if pc.labels is not None:
        maj = _majority_per_group(inverse, pc.labels, len(uniq))
    return PointCloud(centroids, labels=maj, epoch_tag=pc.epoch_tag)


def _majority_per_group(group_ids, labels, n_groups) -> np.ndarray:
    """Majority label per group, ties broken toward the lowest label."""
    labels = np.asarray(labels, dtype=np.int64)
    base = labels.max() + 1 if len(labels) else 1
    pair = group_ids.astype(np.int64) * base + labels
    upair, pcounts = np.unique(pair, return_counts=True)
    g = upair // base
    lab = upair % base
    # Sort by (group, count desc, label asc) and keep the first row per group.
    order = np.lexsort((lab, -pcounts, g))
    g_sorted = g[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = g_sorted[1:] != g_sorted[:-1]
    out = np.zeros(n_groups, dtype=np.int32)
    out[g_sorted[first]] = lab[order][first].astype(np.int32)
    return out


class SpatialIndex:
    """Immutable k-d tree acceleration over a cloud's XYZ and XY coordinates.

    Queries match a brute-force scan exactly; knn ties at equal distance are
    broken toward the lower point id.
    """

    def __init__(self, pc: PointCloud):
        self._xyz = pc.xyz
        self._tree3d = cKDTree(pc.xyz) if len(pc) else None
        self._tree2d = cKDTree(pc.xyz[:, :2]) if len(pc) else None

    def __len__(self) -> int:
        return len(self._xyz)

    def knn(self, query: Point, k: int):
        """The k nearest points to `query`: list of (point_id, distance)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if self._tree3d is None:
            raise ValueError("cannot query an empty index")
        q = np.array([query.x, query.y, query.z], dtype=np.float64)
        n = len(self._xyz)
        kq = min(k, n)
        d, _ = self._tree3d.query(q, k=kq)
        d = np.atleast_1d(d)
        # Re-rank every candidate at distance <= d_k so equal-distance ties
        # resolve toward the lower id regardless of tree traversal order.
        rmax = float(d[-1])
        cand = self._tree3d.query_ball_point(q, r=np.nextafter(rmax, np.inf))
        cand = np.asarray(sorted(cand), dtype=np.int64)
        dist = np.sqrt(((self._xyz[cand] - q) ** 2).sum(axis=1))
        order = np.lexsort((cand, dist))[:kq]
        return [(int(cand[i]), float(dist[i])) for i in order]

    def knn_batch(self, queries: np.ndarray, k: int):
        """Vectorized knn for many queries; returns (ids, dists) arrays.

        Ties are resolved by tree order here (used in bulk feature extraction
        where query sets are continuous and exact ties do not occur).
        """
        if self._tree3d is None:
            raise ValueError("cannot query an empty index")
        kq = min(k, len(self._xyz))
        d, idx = self._tree3d.query(np.asarray(queries, dtype=np.float64), k=kq)
        if kq == 1:
            d = d[:, None]
            idx = idx[:, None]
        return idx, d

    def nearest_batch(self, queries: np.ndarray):
        """Nearest point id and distance for each query row."""
        idx, d = self.knn_batch(queries, 1)
        return idx[:, 0], d[:, 0]

    def radius_query_2d(self, center_xy, radius: float):
        """Ids of points whose XY distance to center is <= radius (any z)."""
        if radius <= 0:
            raise ValueError("radius must be > 0")
        if self._tree2d is None:
            raise ValueError("cannot query an empty index")
        c = np.asarray(center_xy, dtype=np.float64)
        ids = self._tree2d.query_ball_point(c, r=radius)
        return sorted(int(i) for i in ids)

    def radius_query_2d_batch(self, centers_xy: np.ndarray, radius: float):
        if radius <= 0:
            raise ValueError("radius must be > 0")
        if self._tree2d is None:
            raise ValueError("cannot query an empty index")
        return self._tree2d.query_ball_point(
            np.asarray(centers_xy, dtype=np.float64), r=radius
        )

    def radius_query_3d(self, center, radius: float):
        """Ids within a 3D ball; used by the stability feature."""
        if radius <= 0:
            raise ValueError("radius must be > 0")
        if self._tree3d is None:
            raise ValueError("cannot query an empty index")
        c = np.asarray(center, dtype=np.float64)
        return sorted(int(i) for i in self._tree3d.query_ball_point(c, r=radius))

    def count_within_batch(self, centers: np.ndarray, radius: float) -> np.ndarray:
        """Number of indexed points within a 3D ball around each center."""
        if self._tree3d is None:
            raise ValueError("cannot query an empty index")
        hits = self._tree3d.query_ball_point(
            np.asarray(centers, dtype=np.float64), r=radius, return_length=True
        )
        return np.asarray(hits, dtype=np.int64)


def knn(index: SpatialIndex, query: Point, k: int):
    return index.knn(query, k)


def radius_query_2d(index: SpatialIndex, center_xy, radius: float):
    return index.radius_query_2d(center_xy, radius)
