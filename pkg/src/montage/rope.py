"""3D rotary position embedding over (temporal, height, width) channel groups.

Each image is a pseudo-frame with one temporal index; its tokens keep their
native 2D patch-grid coordinates. Two temporal layouts are supported:

* ``marginal``: inputs take the head of the temporal range and outputs the
  tail, leaving a wide gap in between.
* ``even``: all frames spread uniformly over the whole range (ablation
  baseline).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PlanMismatch, ShapeMismatch, TooManyFrames
from .tensor import Tensor, rotate_pairs

STRATEGIES = ("marginal", "even")


def default_split(head_dim: int) -> tuple[int, int, int]:
    """Temporal gets about a quarter of the channels, the rest is shared by H and W."""
    d_t = 2 * max(1, round(head_dim / 8))
    d_h = 2 * ((head_dim - d_t) // 4)
    return d_t, d_h, head_dim - d_t - d_h


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int = 32
    split: tuple[int, int, int] | None = None
    theta_base: float = 10000.0
    temporal_slots: int = 32
    input_range: tuple[int, int] = (0, 7)  # inclusive
    output_range: tuple[int, int] = (24, 31)

    def __post_init__(self):
        if self.split is None:
            object.__setattr__(self, "split", default_split(self.head_dim))
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        object.__setattr__(self, "input_range", tuple(self.input_range))
        object.__setattr__(self, "output_range", tuple(self.output_range))
        if self.head_dim % 2 or sum(self.split) != self.head_dim or any(s % 2 for s in self.split):
            raise ConfigError(f"bad rope split {self.split} for head_dim {self.head_dim}")
        if self.theta_base <= 0:
            raise ConfigError("theta_base must be positive")
        for lo, hi in (self.input_range, self.output_range):
            if not (0 <= lo <= hi < self.temporal_slots):
                raise ConfigError(f"range ({lo}, {hi}) outside [0, {self.temporal_slots})")
        (a0, a1), (b0, b1) = self.input_range, self.output_range
        if not (a1 < b0 or b1 < a0):
            raise ConfigError("input and output ranges overlap")

    @property
    def input_capacity(self) -> int:
        return self.input_range[1] - self.input_range[0] + 1

    @property
    def output_capacity(self) -> int:
        return self.output_range[1] - self.output_range[0] + 1


@dataclass
class RopeIndexPlan:
    """Temporal index per frame plus the patch grid each frame lives on."""

    temporal: list[int]
    grids: list[tuple[int, int]]
    n_in: int
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.temporal) != len(self.grids):
            raise PlanMismatch("one grid per frame required")
        rows = []
        for t, (gh, gw) in zip(self.temporal, self.grids):
            hh, ww = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
            block = np.stack([np.full(gh * gw, t), hh.ravel(), ww.ravel()], axis=1)
            rows.append(block)
        self.positions = (
            np.concatenate(rows, axis=0).astype(np.int64) if rows else np.zeros((0, 3), np.int64)
        )

    @property
    def inputs(self) -> list[int]:
        return self.temporal[: self.n_in]

    @property
    def outputs(self) -> list[int]:
        return self.temporal[self.n_in :]

    @property
    def n_tokens(self) -> int:
        return self.positions.shape[0]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def temporal_indices(n_in: int, n_out: int, strategy: str, cfg: RopeConfig) -> list[int]:
    if n_in < 0 or n_out < 0:
        raise ValueError("frame counts must be non-negative")
    if strategy == "marginal":
        if n_in > cfg.input_capacity or n_out > cfg.output_capacity:
            raise TooManyFrames(
                f"marginal layout holds {cfg.input_capacity} inputs and "
                f"{cfg.output_capacity} outputs, got {n_in} and {n_out}"
            )
        lo_in, lo_out = cfg.input_range[0], cfg.output_range[0]
        return [lo_in + i for i in range(n_in)] + [lo_out + j for j in range(n_out)]
    if strategy == "even":
        n = n_in + n_out
        if n > cfg.temporal_slots:
            raise TooManyFrames(f"{n} frames exceed {cfg.temporal_slots} temporal slots")
        if n == 1:
            return [0]
        return [_round_half_up(i * (cfg.temporal_slots - 1) / (n - 1)) for i in range(n)]
    raise ValueError(f"unknown rope strategy {strategy!r}")


def assign_temporal_indices(
    n_in: int,
    n_out: int,
    strategy: str = "marginal",
    cfg: RopeConfig | None = None,
    grids: list[tuple[int, int]] | None = None,
) -> RopeIndexPlan:
    cfg = cfg or RopeConfig()
    temporal = temporal_indices(n_in, n_out, strategy, cfg)
    if grids is None:
        grids = [(1, 1)] * len(temporal)
    if len(grids) != len(temporal):
        raise PlanMismatch(f"{len(grids)} grids for {len(temporal)} frames")
    return RopeIndexPlan(temporal=temporal, grids=list(grids), n_in=n_in)


def build_freqs(cfg: RopeConfig) -> dict[str, np.ndarray]:
    """Per-axis frequencies ``theta_base ** (-2j / d_axis)``."""
    out = {}
    for axis, d in zip("thw", cfg.split):
        j = np.arange(d // 2, dtype=np.float64)
        out[axis] = cfg.theta_base ** (-2.0 * j / d)
    return out


def rope_angles(positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Angles of shape (tokens, head_dim // 2) for integer (T, H, W) positions."""
    freqs = build_freqs(cfg)
    pos = np.asarray(positions, dtype=np.float64)
    return np.concatenate(
        [pos[:, 0:1] * freqs["t"], pos[:, 1:2] * freqs["h"], pos[:, 2:3] * freqs["w"]], axis=1
    )


def cos_sin(positions: np.ndarray, cfg: RopeConfig, dtype=np.float32):
    """Per-channel cos/sin tables (each pair's value repeated twice), shape (tokens, head_dim)."""
    ang = np.repeat(rope_angles(positions, cfg), 2, axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(x: Tensor, plan: RopeIndexPlan, cfg: RopeConfig) -> Tensor:
    """Rotate image-token queries or keys shaped (tokens, heads, head_dim)."""
    if x.ndim != 3 or x.shape[-1] != cfg.head_dim:
        raise ShapeMismatch(f"expected (tokens, heads, {cfg.head_dim}), got {x.shape}")
    if x.shape[0] != plan.n_tokens:
        raise PlanMismatch(f"{x.shape[0]} tokens but plan covers {plan.n_tokens}")
    c, s = cos_sin(plan.positions, cfg, dtype=x.dtype)
    return rotate_pairs(x, c[:, None, :], s[:, None, :])
