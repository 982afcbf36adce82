"""SGD with momentum and an exponentially decaying learning rate."""

from __future__ import annotations

import numpy as np

from .backbone import NetParams


class GradientNaNError(FloatingPointError):
    """A gradient buffer contained NaN/Inf; training must stop."""


def sgd_update(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
               lr: float, momentum: float):
    """One in-place step: v <- momentum*v + g; p <- p - lr*v."""
    velocity *= momentum
    velocity += grad
    param -= lr * velocity
    return param, velocity


class SgdMomentum:
    def __init__(self, params: NetParams, lr0: float = 1e-3,
                 momentum: float = 0.98, lr_decay: float = 0.95,
                 grad_clip: float = None):
        self.params = params
        self.lr0 = lr0
        self.momentum = momentum
        self.lr_decay = lr_decay
        self.grad_clip = grad_clip  # per-tensor global-norm cap, None = off
        self._velocity = {
            name: np.zeros_like(t.data) for name, t in params.trainable()
        }

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * (self.lr_decay ** epoch)

    def step(self, epoch: int) -> None:
        lr = self.lr_at(epoch)
        for name, t in self.params.trainable():
            if t.grad is None:
                grad = np.zeros_like(t.data)
            else:
                grad = t.grad
                if not np.all(np.isfinite(grad)):
                    raise GradientNaNError(f"non-finite gradient in {name!r}")
                if self.grad_clip is not None:
                    norm = float(np.linalg.norm(grad))
                    if norm > self.grad_clip:
                        grad = grad * (self.grad_clip / norm)
            v = self._velocity.setdefault(name, np.zeros_like(t.data))
            sgd_update(t.data, grad, v, lr, self.momentum)
        self.params.check_finite()
        self.params.zero_grads()
