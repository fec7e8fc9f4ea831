"""Flow-matching objective and the guided Euler sampler.

Convention: ``t = 0`` is data, ``t = 1`` is noise, ``x_t = (1 - t) x + t eps``
and the regression target is the constant velocity ``eps - x``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .errors import ConfigError, EmptyMask, ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 6.0
    shift: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.shift <= 0:
            raise ConfigError("shift must be positive")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be non-negative")


def shift_time(u, s: float = 5.0):
    """Monotone reparameterisation ``s u / (1 + (s - 1) u)`` pushing mass towards the noise end."""
    u = np.asarray(u, dtype=np.float64)
    out = s * u / (1.0 + (s - 1.0) * u)
    return float(out) if out.ndim == 0 else out


def shifted_density(t, s: float = 5.0):
    """Density of ``shift_time(U, s)`` for ``U ~ Uniform[0, 1]``."""
    t = np.asarray(t, dtype=np.float64)
    return s / (s - (s - 1.0) * t) ** 2


def sample_train_times(rng: np.random.Generator, n: int, s: float = 5.0) -> np.ndarray:
    return np.atleast_1d(shift_time(rng.random(n), s))


def make_training_pair(x: np.ndarray, eps: np.ndarray, t: float):
    if x.shape != eps.shape:
        raise ShapeMismatch(f"data {x.shape} vs noise {eps.shape}")
    t = np.asarray(t, dtype=x.dtype)
    return (1 - t) * x + t * eps, eps - x


def fm_loss(pred: Tensor, v_target: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean squared error over the masked token rows only.

    ``pred`` and ``v_target`` are (..., tokens, width); ``loss_mask`` is (..., tokens).
    """
    mask = np.asarray(loss_mask, dtype=bool)
    if pred.shape != np.shape(v_target) or pred.shape[:-1] != mask.shape:
        raise ShapeMismatch(f"pred {pred.shape}, target {np.shape(v_target)}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("loss mask selects no tokens")
    w = mask[..., None].astype(pred.dtype)
    diff = (pred - np.asarray(v_target, dtype=pred.dtype)) * w
    return (diff * diff).sum() * (1.0 / (count * pred.shape[-1]))


def time_grid(steps: int, shift: float) -> np.ndarray:
    """Decreasing times from 1 to 0 with ``steps`` intervals, uniform before shifting."""
    return shift_time(np.linspace(1.0, 0.0, steps + 1), shift)


def euler_sample(
    velocity: Callable[[np.ndarray, float], np.ndarray],
    x1: np.ndarray,
    steps: int = 50,
    shift: float = 5.0,
    cfg_scale: float = 1.0,
    velocity_uncond: Callable[[np.ndarray, float], np.ndarray] | None = None,
) -> np.ndarray:
    """Integrate dx/dt = v from t = 1 down to t = 0.

    With guidance the field is ``v_u + w (v_c - v_u)``; at ``w == 1`` the
    unconditional branch is never evaluated.
    """
    ts = time_grid(steps, shift)
    x = np.array(x1, copy=True)
    guided = cfg_scale != 1.0 and velocity_uncond is not None
    for k in range(steps):
        t, t_next = float(ts[k]), float(ts[k + 1])
        v = velocity(x, t)
        if guided:
            vu = velocity_uncond(x, t)
            v = vu + cfg_scale * (v - vu)
        x = x + (t_next - t) * v
    return x


def sample(
    params: dict[str, Tensor],
    model_cfg,
    refs: list[np.ndarray],
    instruction: str,
    n_out: int,
    cfg: SamplerConfig | None = None,
    size: tuple[int, int] | None = None,
    strategy: str = "marginal",
) -> list[np.ndarray]:
    """Generate ``n_out`` images in one joint pass over all targets.

    Output size defaults to the first reference's size, or ``size``.
    """
    from .model import forward
    from .packing import PackedSequence, Sample, collate, from_model_space, pack, unpatchify

    cfg = cfg or SamplerConfig()
    if size is None:
        if not refs:
            raise ValueError("size is required when no references are given")
        size = refs[0].shape[:2]
    h, w = size
    p = model_cfg.patch
    dtype = params["img.in.w"].dtype
    blank = np.zeros((h, w, 3))
    proto = Sample(refs=list(refs), targets=[blank] * n_out, instruction=instruction)
    pcfg = model_cfg.pack_config
    seq_c = pack(proto, 0.0, None, strategy, pcfg, dtype=dtype)
    seq_u = pack(proto, 0.0, None, strategy, pcfg, drop_caption=True, dtype=dtype)
    ts = seq_c.target_slice

    rng = np.random.default_rng(cfg.seed)
    n_tok = seq_c.image_tokens.shape[0] - ts.start
    x1 = rng.standard_normal((n_tok, seq_c.image_tokens.shape[1])).astype(dtype)

    def field(seq: PackedSequence):
        def v(x, t):
            seq.image_tokens[ts] = x
            with tc.no_grad():
                out = forward(params, model_cfg, collate([seq]), np.array([t]))
            return out.data[0, ts]

        return v

    x0 = euler_sample(field(seq_c), x1, cfg.steps, cfg.shift, cfg.cfg_scale, field(seq_u))
    images = []
    for k in range(n_out):
        off, n = seq_c.frame_spans[len(refs) + k]
        tok = x0[off - ts.start : off - ts.start + n]
        images.append(from_model_space(unpatchify(tok.astype(np.float64), h, w, p)))
    return images
