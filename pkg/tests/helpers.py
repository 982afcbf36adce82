"""Shared test utilities: brute-force spatial oracles and gradient checking."""

from __future__ import annotations

import numpy as np

from deepchange.net import autodiff as ad


def brute_knn(xyz: np.ndarray, query: np.ndarray, k: int):
    """Reference knn: full scan, sorted by (distance, id)."""
    d = np.sqrt(((xyz - query) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(xyz)), d))[: min(k, len(xyz))]
    return [(int(i), float(d[i])) for i in order]


def brute_radius_2d(xyz: np.ndarray, center_xy, radius: float):
    d = np.sqrt(((xyz[:, :2] - np.asarray(center_xy)) ** 2).sum(axis=1))
    return sorted(np.flatnonzero(d <= radius).tolist())


def gradcheck(build_loss, tensors, rng, n_coords: int = 8, h_scale: float = 1e-6,
              tol: float = 1e-4, atol: float = 1e-7) -> float:
    """Central finite differences against reverse-mode gradients.

    `build_loss()` must rebuild the graph from the given float64 leaf tensors
    and return a scalar Tensor. A coordinate passes when
    |numeric - analytic| <= atol + tol * max(|numeric|, |analytic|): the atol
    term absorbs finite-difference roundoff around true-zero gradients.
    Coordinates failing at the base step are retried at a smaller one, which
    discriminates piecewise-linear kinks inside the stencil (error shrinks
    with h) from wrong adjoints (error persists). Returns the worst relative
    error seen among resolvable coordinates.
    """
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for t in tensors:
        assert t.data.dtype == np.float64, "gradcheck needs float64 tensors"
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.ravel()
        n = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        for i in coords:
            ana = grad.ravel()[i]
            rel = 0.0
            ok = False
            for h in (h_scale * max(1.0, abs(flat[i])),
                      h_scale * max(1.0, abs(flat[i])) / 64.0):
                keep = flat[i]
                flat[i] = keep + h
                lp = build_loss().item()
                flat[i] = keep - h
                lm = build_loss().item()
                flat[i] = keep
                num = (lp - lm) / (2.0 * h)
                scale_ref = max(abs(num), abs(ana))
                if abs(num - ana) <= atol + tol * scale_ref:
                    ok = True
                    break
                rel = abs(num - ana) / max(scale_ref, 1e-12)
            if not ok:
                assert False, (
                    f"gradient mismatch at coord {i}: numeric {num:.6e} vs "
                    f"analytic {ana:.6e} (rel err {rel:.3e} >= {tol})")
            worst = max(worst, rel)
        t.grad = None
    return worst


def leaf(data, rng=None, shape=None, scale=1.0):
    """Float64 leaf tensor, random-normal when shape is given."""
    if shape is not None:
        data = rng.normal(0.0, scale, shape)
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
