"""Minimal dense-tensor reverse-mode differentiation engine.

Tensors wrap numpy arrays (float32 by default, float64 supported for
gradient checking). Operations build a tape; `backward()` walks it in
reverse topological order. Besides generic array ops, the engine provides
fused primitives for the point-convolution pipeline (neighborhood
convolution, row gathering, row normalization, the two losses) with
hand-derived adjoints, so the hot path stays fully vectorized.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _make(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may broadcast as a (C,) bias over (N, C)."""
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g if a.data.shape == g.shape else _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(g if b.data.shape == g.shape else _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g if a.data.shape == g.shape else _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(-g if b.data.shape == g.shape else -_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            ga = g * b.data
            a.accumulate(ga if a.data.shape == ga.shape else _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = g * a.data
            b.accumulate(gb if b.data.shape == gb.shape else _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _make(data, (a,), backward_fn)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    bd = b.data.T if transpose_b else b.data
    data = a.data @ bd

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g @ bd.T)
        if b.requires_grad:
            gb = a.data.T @ g
            b.accumulate(gb.T if transpose_b else gb)

    return _make(data, (a, b), backward_fn)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, slope * a.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(np.where(mask, g, slope * g))

    return _make(data, (a,), backward_fn)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[idx[i]]; the adjoint scatter-adds back into a."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def backward_fn(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _make(data, (a,), backward_fn)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    data = np.concatenate([a.data, b.data], axis=1)
    na = a.data.shape[1]

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g[:, :na])
        if b.requires_grad:
            b.accumulate(g[:, na:])

    return _make(data, (a, b), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)
    n = a.data.size

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, g / n))

    return _make(data, (a,), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, g))

    return _make(data, (a,), backward_fn)


def l2_normalize_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise x / max(||x||, eps)."""
    nrm = np.linalg.norm(a.data, axis=1, keepdims=True)
    denom = np.maximum(nrm, eps)
    data = a.data / denom
    small = (nrm <= eps).ravel()

    def backward_fn(g):
        if not a.requires_grad:
            return
        dot = (g * data).sum(axis=1, keepdims=True)
        ga = (g - data * dot) / denom
        if small.any():
            ga[small] = g[small] / eps
        a.accumulate(ga)

    return _make(data, (a,), backward_fn)


def point_conv_op(x: Tensor, weights: Tensor, bias, h: np.ndarray,
                  neighbor_ids: np.ndarray) -> Tensor:
    """Kernel-point convolution over fixed neighborhoods.

    out[i] = sum_j sum_p h[i, j, p] * x[nbr[i, j]] @ W[p] (+ bias), with h the
    precomputed kernel influence weights. x is (N_in, C_in), weights is
    (P, C_in, C_out), h is (N_out, k, P), neighbor_ids is (N_out, k).
    """
    n_out, k, p = h.shape
    c_in = x.data.shape[1]
    c_out = weights.data.shape[2]
    xn = x.data[neighbor_ids]  # (N_out, k, C_in)
    ht = np.ascontiguousarray(h.transpose(0, 2, 1))  # (N_out, P, k)
    gathered = np.matmul(ht, xn)  # (N_out, P, C_in), batched GEMM
    flat = gathered.reshape(n_out, p * c_in)
    w2 = weights.data.reshape(p * c_in, c_out)
    data = flat @ w2
    if bias is not None:
        data = data + bias.data

    def backward_fn(g):
        if weights.requires_grad:
            weights.accumulate((flat.T @ g).reshape(p, c_in, c_out))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        if x.requires_grad:
            dflat = g @ w2.T  # (N_out, P*C_in)
            dg = dflat.reshape(n_out, p, c_in)
            dxn = np.matmul(h, dg)  # (N_out, k, C_in)
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, neighbor_ids.ravel(), dxn.reshape(n_out * k, c_in))

    parents = (x, weights) if bias is None else (x, weights, bias)
    return _make(data, parents, backward_fn)


def nll_loss_op(logits: Tensor, labels: np.ndarray, class_weights=None) -> Tensor:
    """Mean over points of w[y] * (-log softmax(logits)[y]), natural log."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    losses = -w * logp[np.arange(n), labels]
    data = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def backward_fn(g):
        if not logits.requires_grad:
            return
        soft = ez / sez
        grad = soft * w[:, None]
        grad[np.arange(n), labels] -= w
        logits.accumulate((g * grad / n).astype(logits.data.dtype))

    return _make(data, (logits,), backward_fn)


def contrastive_pull_op(feats: Tensor, y_sim: np.ndarray) -> Tensor:
    """Mean over points of 0.5 * y_sim * ||feature row||^2."""
    y = np.asarray(y_sim, dtype=feats.data.dtype).reshape(-1, 1)
    if len(y) != feats.data.shape[0]:
        raise ValueError("y_sim must cover every point")
    n = feats.data.shape[0]
    data = np.asarray(0.5 * (y * feats.data ** 2).sum() / n, dtype=feats.data.dtype)

    def backward_fn(g):
        if feats.requires_grad:
            feats.accumulate(g * y * feats.data / n)

    return _make(data, (feats,), backward_fn)
