"""Mini-batch k-means over deep features, pseudo-label bookkeeping and
clustering diagnostics (normalized mutual information, per-cluster entropy)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (K, D) float32
    assignments: np.ndarray  # (N,) int32, nearest-centroid ids
    counts: np.ndarray  # (K,) int64

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _assign(features: np.ndarray, centroids: np.ndarray, block: int = 16384):
    """Nearest centroid per row (squared Euclidean), blocked for memory."""
    n = len(features)
    out = np.empty(n, dtype=np.int32)
    c_sq = (centroids.astype(np.float64) ** 2).sum(axis=1)
    for start in range(0, n, block):
        x = features[start:start + block].astype(np.float64)
        d = x @ centroids.T.astype(np.float64)
        d = (x ** 2).sum(axis=1)[:, None] - 2.0 * d + c_sq[None, :]
        out[start:start + block] = np.argmin(d, axis=1)
    return out


def inertia(features: np.ndarray, model: ClusterModel) -> float:
    diff = features.astype(np.float64) - model.centroids[model.assignments].astype(np.float64)
    return float((diff ** 2).sum())


def _kmeans_pp_init(features: np.ndarray, k: int, rng: np.random.Generator):
    """k-means++ seeding on the given (sub)sample."""
    n = len(features)
    x = features.astype(np.float64)
    centroids = np.empty((k, features.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = x[int(rng.integers(n))]
            continue
        probs = d2 / total
        nxt = int(rng.choice(n, p=probs))
        centroids[i] = x[nxt]
        d2 = np.minimum(d2, ((x - centroids[i]) ** 2).sum(axis=1))
    return centroids


def minibatch_kmeans(features: np.ndarray, k: int, batch_size: int = 1024,
                     n_iters: int = 100, seed: int = 0,
                     init_sample: int = None) -> ClusterModel:
    """Streaming mini-batch k-means with k-means++ seeding.

    Per iteration a random batch is assigned to its nearest centroids and each
    centroid moves toward its batch members with a per-centroid learning rate
    of 1 / lifetime-count. A final full pass produces the assignments.
    Deterministic for a fixed seed.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] < 1:
        raise ValueError("features must be a non-empty (N, D) matrix")
    n = len(features)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    init_sample = min(n, init_sample or max(10 * k, 2048))
    sub = rng.choice(n, size=init_sample, replace=False)
    centroids = _kmeans_pp_init(features[sub], k, rng)

    lifetime = np.zeros(k, dtype=np.int64)
    d = features.shape[1]
    for _ in range(n_iters):
        batch = rng.integers(0, n, size=min(batch_size, n))
        x = features[batch].astype(np.float64)
        a = _assign(features[batch], centroids.astype(np.float32))
        # Sequential per-member updates at rate 1/lifetime reduce to a
        # weighted running mean per centroid.
        cnts = np.bincount(a, minlength=k).astype(np.int64)
        sums = np.zeros((k, d))
        for col in range(d):
            sums[:, col] = np.bincount(a, weights=x[:, col], minlength=k)
        upd = cnts > 0
        denom = (lifetime[upd] + cnts[upd]).astype(np.float64)[:, None]
        centroids[upd] = (lifetime[upd, None] * centroids[upd] + sums[upd]) / denom
        lifetime += cnts

    # Consolidation: one full pass, recompute occupied centroids as member
    # means, then the final assignment pass (so K=1 lands exactly on the
    # global mean and assignments always index their nearest centroid).
    assignments = _assign(features, centroids.astype(np.float32))
    occupied = np.bincount(assignments, minlength=k) > 0
    x64 = features.astype(np.float64)
    for c in np.flatnonzero(occupied):
        centroids[c] = x64[assignments == c].mean(axis=0)
    centroids = centroids.astype(np.float32)
    assignments = _assign(features, centroids)
    counts = np.bincount(assignments, minlength=k).astype(np.int64)
    return ClusterModel(centroids, assignments, counts)


def split_empty(model: ClusterModel, features: np.ndarray, seed: int = 0) -> ClusterModel:
    """Fill empty clusters by randomly halving the largest one.

    Repeats until no cluster is empty; both affected centroids are recomputed
    as their member means.
    """
    features = np.asarray(features, dtype=np.float32)
    k = model.k
    if len(features) < k:
        raise ValueError("fewer points than clusters; cannot fill empties")
    assignments = model.assignments.copy()
    centroids = model.centroids.astype(np.float64).copy()
    counts = np.bincount(assignments, minlength=k).astype(np.int64)
    rng = np.random.default_rng(seed)
    while (counts == 0).any():
        empty = int(np.flatnonzero(counts == 0)[0])
        largest = int(np.argmax(counts))
        member_ids = np.flatnonzero(assignments == largest)
        perm = rng.permutation(member_ids)
        half = perm[: len(perm) // 2]
        assignments[half] = empty
        for c in (largest, empty):
            ids = np.flatnonzero(assignments == c)
            centroids[c] = features[ids].astype(np.float64).mean(axis=0)
            counts[c] = len(ids)
    return ClusterModel(centroids.astype(np.float32), assignments, counts)


def compute_weights(counts, clamp: float = 50.0) -> np.ndarray:
    """Inverse-frequency pseudo-cluster weights.

    Proportional to 1 / count, normalized to mean 1, clamped into
    [1/clamp, clamp], with the floor raised to max/clamp so the max/min ratio
    never exceeds the clamp.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("all cluster counts must be positive (run split_empty first)")
    if clamp < 1.0:
        raise ValueError("clamp must be >= 1")
    w = 1.0 / counts
    w = w / w.mean()
    w = np.clip(w, 1.0 / clamp, clamp)
    w = np.maximum(w, w.max() / clamp)
    return w


def _entropy_bits(probs: np.ndarray) -> float:
    p = probs[probs > 0]
    # Sorted summation: bitwise identical under any relabeling permutation.
    return float(-np.sort(p * np.log2(p)).sum())


def _contingency(labels_a, labels_b):
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if len(a) != len(b):
        raise ValueError("labelings must have equal length")
    if len(a) == 0:
        raise ValueError("labelings must be non-empty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    table = np.zeros((na, nb), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def nmi(labels_a, labels_b) -> float:
    """Normalized mutual information between two labelings, in [0, 1].

    I(A, B) / sqrt(H(A) H(B)) with base-2 logs. If either marginal entropy is
    zero the labelings carry no splitting information: the result is 1.0 when
    both are constant (identical trivial partitions) and 0.0 otherwise.
    """
    table = _contingency(labels_a, labels_b)
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = _entropy_bits(pa)
    hb = _entropy_bits(pb)
    if ha == 0.0 or hb == 0.0:
        return 1.0 if (ha == 0.0 and hb == 0.0) else 0.0
    pj = table / n
    mask = pj > 0
    outer = pa[:, None] * pb[None, :]
    # Sorted summation keeps the result exactly symmetric in its arguments
    # and invariant under relabeling (same term multiset either way).
    terms = pj[mask] * np.log2(pj[mask] / outer[mask])
    mi = max(float(np.sort(terms).sum()), 0.0)
    return float(mi / np.sqrt(ha * hb))


def cluster_entropy(assignments, true_labels):
    """Purity diagnostics per pseudo-cluster.

    Returns (cluster_ids, entropies_bits, majority_fractions, mean_entropy)
    with clusters sorted by increasing entropy. Only clusters that actually
    contain points are reported; the mean is unweighted over them.
    """
    a = np.asarray(assignments).ravel()
    t = np.asarray(true_labels).ravel()
    if len(a) != len(t):
        raise ValueError("labelings must have equal length")
    table = _contingency(a, t)
    ids = np.unique(a)
    totals = table.sum(axis=1)
    probs = table / totals[:, None]
    ent = np.array([_entropy_bits(row) for row in probs])
    maj = probs.max(axis=1)
    order = np.argsort(ent, kind="stable")
    return ids[order], ent[order], maj[order], float(ent.mean())


_MODEL_MAGIC = b"DCKM"


def save_cluster_model(path, model: ClusterModel) -> None:
    """Binary layout: magic, K u32, D u32, centroids f32 rows, assignments u32."""
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<II", model.k, model.dim))
        fh.write(np.ascontiguousarray(model.centroids, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.assignments, dtype="<u4").tobytes())


def load_cluster_model(path) -> ClusterModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _MODEL_MAGIC:
            raise ValueError(f"{path}: not a cluster model file")
        k, d = struct.unpack("<II", fh.read(8))
        centroids = np.frombuffer(fh.read(4 * k * d), dtype="<f4").reshape(k, d).copy()
        assignments = np.frombuffer(fh.read(), dtype="<u4").astype(np.int32)
    counts = np.bincount(assignments, minlength=k).astype(np.int64)
    return ClusterModel(centroids, assignments, counts)
