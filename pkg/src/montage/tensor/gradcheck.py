"""Central finite-difference gradient checking (run under float64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm((a - b).ravel()))
    den = max(float(np.linalg.norm(a.ravel())), float(np.linalg.norm(b.ravel())), 1e-12)
    return num / den


def numeric_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``; only flat ``entries`` if given (others left 0)."""
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_gradients(
    loss_fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Return the relative error between analytic and numeric gradients for each input.

    With ``max_entries`` only that many randomly chosen entries per input are compared.
    """
    for x in inputs:
        x.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    def f():
        from .core import no_grad

        with no_grad():
            return float(loss_fn().data)

    rng = rng or np.random.default_rng(0)
    errs = []
    for a, x in zip(analytic, inputs):
        if max_entries is None or x.size <= max_entries:
            errs.append(rel_error(a, numeric_grad(f, x, h)))
        else:
            idx = np.sort(rng.choice(x.size, max_entries, replace=False))
            errs.append(rel_error(a.reshape(-1)[idx], numeric_grad(f, x, h, idx).reshape(-1)[idx]))
    return errs
