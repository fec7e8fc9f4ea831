"""AdamW with decoupled weight decay, and global gradient-norm clipping."""
from __future__ import annotations

import math

import numpy as np


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            g64 = np.asarray(g, dtype=np.float64)
            total += float(np.dot(g64.ravel(), g64.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params: dict, max_norm: float = 1.0) -> float:
    """Scale every ``.grad`` in place so the global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(p.grad for p in params.values())
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if self.weight_decay:
                p.data -= p.data.dtype.type(lr * self.weight_decay) * p.data
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * step).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=self.m[k].dtype)
            self.v[k] = np.array(state["v"][k], dtype=self.v[k].dtype)
