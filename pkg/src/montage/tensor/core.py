"""Dense tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
calling thread's tape. ``backward`` walks the tape in reverse recording order
(which is a valid topological order), accumulates gradients into leaf
tensors and clears the tape.
"""
from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import NonScalarLoss, ShapeMismatch
from .kernels import KERNELS

_DEFAULT_DTYPE = np.float32
_DEBUG = os.environ.get("MONTAGE_DEBUG", "") not in ("", "0")
_local = threading.local()


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with (e.g. float64 for grad checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


class Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one thread."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    rg = False
    if _grad_enabled():
        for p in parents:
            if p.requires_grad:
                rg = True
                break
    out.requires_grad = rg
    if rg:
        get_tape().record(Node(out, parents, backward))
    if _DEBUG:
        _check_finite(data, parents)
    return out


def _check_finite(data, parents) -> None:
    if np.all(np.isfinite(data)):
        return
    if all(np.all(np.isfinite(p.data)) for p in parents):
        raise FloatingPointError("non-finite value produced from finite inputs")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf, then clear the tape."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape = get_tape()
    if not loss.requires_grad:
        tape.clear()
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for p, gp in zip(node.inputs, in_grads):
                if gp is None or not p.requires_grad:
                    continue
                if p._leaf:
                    p.grad = gp.astype(p.data.dtype, copy=True) if p.grad is None else p.grad + gp
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = gp if prev is None else prev + gp
    finally:
        tape.clear()


# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const(a, b)
    b = _const(b, a)
    _broadcast_check(a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const(a, b)
    b = _const(b, a)
    _broadcast_check(a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const(a, b)
    b = _const(b, a)
    _broadcast_check(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const(a, b)
    b = _const(b, a)
    _broadcast_check(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))

    def bw(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _result(x * s, (a,), bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _result(0.5 * x * (1.0 + th), (a,), bw)


# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, ids, g)
        return (z,)

    return _result(table.data[ids], (table,), bw)


# heavy primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeMismatch(f"batch dims not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(KERNELS.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(KERNELS.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(KERNELS.matmul(ad, bd), (a, b), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries map to 0."""
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeMismatch("softmax needs a non-empty last axis")
    y = KERNELS.softmax(a.data)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (a,), bw)


softmax_lastdim = softmax


def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    if gain is not None and gain.shape != (x.shape[-1],):
        raise ShapeMismatch(f"gain shape {gain.shape} does not match last dim {x.shape[-1]}")
    xd = x.data
    gd = gain.data if gain is not None else None
    y, r = KERNELS.rms_norm(xd, gd, eps)
    d = xd.shape[-1]

    def bw(g):
        gh = g * gd if gd is not None else g
        xn = xd / r
        gx = (gh - xn * np.sum(gh * xn, axis=-1, keepdims=True) / d) / r
        ggain = None
        if gain is not None and gain.requires_grad:
            ggain = np.sum((g * xn).reshape(-1, d), axis=0)
        return (gx, ggain) if gain is not None else (gx,)

    parents = (x, gain) if gain is not None else (x,)
    return _result(y, parents, bw)


def _rot90_pairs(v: np.ndarray) -> np.ndarray:
    # (v0, v1) -> (-v1, v0) on consecutive channel pairs
    out = np.empty_like(v)
    out[..., 0::2] = -v[..., 1::2]
    out[..., 1::2] = v[..., 0::2]
    return out


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of ``x`` by per-channel angles.

    ``cos``/``sin`` broadcast against ``x`` and hold each pair's value twice.
    """
    if x.shape[-1] % 2:
        raise ShapeMismatch("rotate_pairs needs an even last dim")
    xd = x.data
    out = xd * cos + _rot90_pairs(xd) * sin

    def bw(g):
        # transpose of a +90 degree pair rotation is the -90 degree rotation
        return (_unbroadcast(g * cos - _rot90_pairs(g * sin), xd.shape),)

    return _result(out.astype(xd.dtype, copy=False), (x,), bw)
