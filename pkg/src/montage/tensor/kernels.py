"""Forward kernels for the heavy primitives.

Two interchangeable implementations live here: the default vectorized numpy
path and a pure-Python scalar path that loops element by element. The scalar
path is slow and exists to cross-check the vectorized one.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np


def matmul_vec(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a, b)


def softmax_vec(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True)
    # rows that are entirely masked come out as zeros
    s = np.where(s == 0, 1.0, s)
    return (e / s).astype(x.dtype, copy=False)


def rms_norm_vec(x: np.ndarray, gain: np.ndarray | None, eps: float):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    y = x / r
    if gain is not None:
        y = y * gain
    return y, r


def matmul_scalar(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a_b = np.broadcast_to(a, batch + a.shape[-2:])
    b_b = np.broadcast_to(b, batch + b.shape[-2:])
    m, k = a.shape[-2:]
    n = b.shape[-1]
    out = np.zeros(batch + (m, n), dtype=np.result_type(a, b))
    for idx in np.ndindex(*batch):
        A, B, O = a_b[idx], b_b[idx], out[idx]
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(k):
                    acc += float(A[i, p]) * float(B[p, j])
                O[i, j] = acc
    return out


def softmax_scalar(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        row = [float(v) for v in x[idx]]
        m = max(row)
        if not math.isfinite(m):
            m = 0.0
        e = [math.exp(v - m) for v in row]
        s = sum(e)
        out[idx] = [v / s if s > 0 else 0.0 for v in e]
    return out


def rms_norm_scalar(x: np.ndarray, gain: np.ndarray | None, eps: float):
    y = np.zeros_like(x)
    r = np.zeros(x.shape[:-1] + (1,), dtype=x.dtype)
    d = x.shape[-1]
    for idx in np.ndindex(*x.shape[:-1]):
        row = [float(v) for v in x[idx]]
        rr = math.sqrt(sum(v * v for v in row) / d + eps)
        r[idx] = rr
        y[idx] = [
            v / rr * (float(gain[j]) if gain is not None else 1.0)
            for j, v in enumerate(row)
        ]
    return y, r


class _Kernels:
    def __init__(self):
        self.use_vectorized()

    def use_vectorized(self):
        self.matmul = matmul_vec
        self.softmax = softmax_vec
        self.rms_norm = rms_norm_vec
        self.mode = "vectorized"

    def use_scalar(self):
        self.matmul = matmul_scalar
        self.softmax = softmax_scalar
        self.rms_norm = rms_norm_scalar
        self.mode = "scalar"


KERNELS = _Kernels()


@contextlib.contextmanager
def scalar_kernels():
    """Route matmul/softmax/rms_norm through the pure-Python reference loops."""
    prev = KERNELS.mode
    KERNELS.use_scalar()
    try:
        yield
    finally:
        if prev == "vectorized":
            KERNELS.use_vectorized()
