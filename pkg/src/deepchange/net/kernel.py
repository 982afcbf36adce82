"""Rigid kernel-point dispositions and their influence weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KernelDisposition:
    """Fixed kernel-point offsets (P, 3) with a linear influence bandwidth."""

    points: np.ndarray
    sigma: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("kernel points must be (P, 3)")
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        if (d <= 0).any():
            raise ValueError("kernel points must be pairwise distinct")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return len(self.points)


def make_kernel(radius: float, sigma: float = None) -> KernelDisposition:
    """Fifteen-point rigid kernel: center, both poles, a four-point equator
    and two four-point rings at +-45 degrees elevation.

    All coordinates are exact negations/swaps of two base values, so the
    disposition maps onto itself bitwise under 90-degree rotations about the
    vertical axis (used by the rotation-equivariance tests).
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    r = float(radius)
    a = r / 2.0
    b = r * float(np.sqrt(0.5))
    pts = [
        (0.0, 0.0, 0.0),
        (0.0, 0.0, r), (0.0, 0.0, -r),
        (r, 0.0, 0.0), (0.0, r, 0.0), (-r, 0.0, 0.0), (0.0, -r, 0.0),
        (a, a, b), (-a, a, b), (-a, -a, b), (a, -a, b),
        (a, a, -b), (-a, a, -b), (-a, -a, -b), (a, -a, -b),
    ]
    return KernelDisposition(np.array(pts, dtype=np.float64), float(sigma or radius))


def influence(kernel: KernelDisposition, offsets: np.ndarray) -> np.ndarray:
    """Linear-decay correlation h = max(0, 1 - dist/sigma).

    offsets is (..., 3) of neighbor-minus-support positions; the result adds
    a trailing kernel-point axis. dist^2 expands to
    |y|^2 - 2 y.kp + |kp|^2 so the cross term is a single GEMM.
    """
    kp = kernel.points
    y2 = (offsets ** 2).sum(axis=-1)[..., None]
    cross = offsets.reshape(-1, 3) @ kp.T
    d2 = y2 + (kp ** 2).sum(axis=1) - 2.0 * cross.reshape(*offsets.shape[:-1], len(kp))
    dist = np.sqrt(np.maximum(d2, 0.0))
    return np.maximum(0.0, 1.0 - dist / kernel.sigma)
