"""Desk-scale dual-stream -> single-stream diffusion transformer.

Dual-stream blocks keep separate text and image weights and attend jointly
over the concatenated sequence; single-stream blocks share one set of
weights over the merged stream. A sinusoidal timestep embedding drives
shift/scale/gate modulation of every block. The final projection is zero at
init, so an untrained model predicts zero velocity everywhere.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ConfigMismatch
from .packing import Batch, PackConfig, PackedSequence, collate
from .rope import RopeConfig, cos_sin
from .tensor import Tensor
from .text import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    heads: int = 4
    depth_dual: int = 2
    depth_single: int = 2
    mlp_ratio: int = 4
    patch: int = 4  # keep 3 * patch**2 <= dim: the velocity target has noise in every token channel
    text_len: int = 32
    vocab_size: int = VOCAB_SIZE
    time_freq_dim: int = 256
    modulate_text: bool = True
    rope: RopeConfig | None = None

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth_dual < 0 or self.depth_single < 0 or self.depth_dual + self.depth_single < 1:
            raise ConfigError("need at least one transformer block")
        if self.rope is None:
            object.__setattr__(self, "rope", RopeConfig(head_dim=self.head_dim))
        elif isinstance(self.rope, dict):
            object.__setattr__(self, "rope", RopeConfig(**self.rope))
        if self.rope.head_dim != self.head_dim:
            raise ConfigError(f"rope head_dim {self.rope.head_dim} != {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def token_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio

    @property
    def pack_config(self) -> PackConfig:
        return PackConfig(patch=self.patch, text_len=self.text_len, rope=self.rope)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _block_shapes(prefix: str, D: int, Hd: int, modulated: bool) -> dict[str, tuple]:
    shapes = {}
    if modulated:
        shapes[f"{prefix}.mod.w"] = (D, 6 * D)
        shapes[f"{prefix}.mod.b"] = (6 * D,)
    shapes.update({
        f"{prefix}.qkv.w": (D, 3 * D),
        f"{prefix}.qkv.b": (3 * D,),
        f"{prefix}.proj.w": (D, D),
        f"{prefix}.proj.b": (D,),
        f"{prefix}.mlp1.w": (D, Hd),
        f"{prefix}.mlp1.b": (Hd,),
        f"{prefix}.mlp2.w": (Hd, D),
        f"{prefix}.mlp2.b": (D,),
    })
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, Hd, P = cfg.dim, cfg.hidden, cfg.token_dim
    shapes = {
        "txt.embed": (cfg.vocab_size, D),
        "txt.pos": (cfg.text_len, D),
        "img.in.w": (P, D),
        "img.in.b": (D,),
        "time.w1": (cfg.time_freq_dim, D),
        "time.b1": (D,),
        "time.w2": (D, D),
        "time.b2": (D,),
    }
    for i in range(cfg.depth_dual):
        shapes.update(_block_shapes(f"dual{i}.img", D, Hd, True))
        shapes.update(_block_shapes(f"dual{i}.txt", D, Hd, cfg.modulate_text))
    for i in range(cfg.depth_single):
        shapes.update(_block_shapes(f"single{i}", D, Hd, True))
    shapes.update({
        "final.mod.w": (D, 2 * D),
        "final.mod.b": (2 * D,),
        "final.w": (D, P),
        "final.b": (P,),
    })
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict[str, Tensor]:
    """Truncated-normal (std 0.02) weights, zero biases, zero final projection."""
    dtype = dtype or tc.get_default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name in ("final.w",):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, 0.02)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def _linear(x: Tensor, params, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _modulation(params, name: str, c: Tensor, n: int) -> list[Tensor]:
    m = _linear(c, params, f"{name}.mod")  # (B, n*D)
    B, nd = m.shape
    m = m.reshape(B, 1, nd)
    d = nd // n
    return [m[:, :, i * d : (i + 1) * d] for i in range(n)]


def _modulate(x: Tensor, shift: Tensor | None, scale: Tensor | None) -> Tensor:
    h = tc.rms_norm(x)
    if scale is None:
        return h
    return h * (scale + 1.0) + shift


class _Ctx:
    """Per-forward constants shared by all blocks."""

    def __init__(self, cfg: ModelConfig, batch: Batch, dtype):
        B, L = batch.text_ids.shape
        N = batch.image_tokens.shape[1]
        S = L + N
        hd = cfg.head_dim
        cos = np.ones((B, S, 1, hd), dtype=dtype)
        sin = np.zeros((B, S, 1, hd), dtype=dtype)
        for b in range(B):
            c, s = cos_sin(batch.positions[b], cfg.rope, dtype=dtype)
            cos[b, L:, 0] = c
            sin[b, L:, 0] = s
        # text tokens and padding keep identity rotation
        pad = ~batch.key_mask[:, L:]
        cos[:, L:][pad] = 1.0
        sin[:, L:][pad] = 0.0
        self.cos, self.sin = cos, sin
        bias = np.where(batch.key_mask, 0.0, -np.inf).astype(dtype)
        self.bias = bias[:, None, None, :]  # (B, 1, 1, S)
        self.B, self.L, self.N, self.S = B, L, N, S
        self.scale = 1.0 / float(np.sqrt(hd))


def _attention(cfg: ModelConfig, ctx: _Ctx, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """q, k, v: (B, S, H, hd) -> (B, S, D)."""
    q = tc.rotate_pairs(q, ctx.cos, ctx.sin)
    k = tc.rotate_pairs(k, ctx.cos, ctx.sin)
    q = tc.transpose(q, (0, 2, 1, 3))
    k = tc.transpose(k, (0, 2, 3, 1))
    v = tc.transpose(v, (0, 2, 1, 3))
    logits = (q @ k) * ctx.scale + ctx.bias
    out = tc.softmax(logits) @ v  # (B, H, S, hd)
    out = tc.transpose(out, (0, 2, 1, 3))
    return out.reshape(ctx.B, -1, cfg.dim)


def _qkv(cfg: ModelConfig, h: Tensor, params, name: str):
    B, n, _ = h.shape
    qkv = _linear(h, params, f"{name}.qkv").reshape(B, n, 3, cfg.heads, cfg.head_dim)
    return qkv[:, :, 0], qkv[:, :, 1], qkv[:, :, 2]


def _mlp(h: Tensor, params, name: str) -> Tensor:
    return _linear(tc.gelu(_linear(h, params, f"{name}.mlp1")), params, f"{name}.mlp2")


def _dual_block(cfg, ctx, params, i, txt, img, c):
    pi, pt = f"dual{i}.img", f"dual{i}.txt"
    mi = _modulation(params, pi, c, 6)
    mt = _modulation(params, pt, c, 6) if cfg.modulate_text else [None] * 6

    hi = _modulate(img, mi[0], mi[1])
    ht = _modulate(txt, mt[0], mt[1])
    qi, ki, vi = _qkv(cfg, hi, params, pi)
    qt, kt, vt = _qkv(cfg, ht, params, pt)
    att = _attention(
        cfg, ctx, tc.concat([qt, qi], 1), tc.concat([kt, ki], 1), tc.concat([vt, vi], 1)
    )
    at, ai = att[:, : ctx.L], att[:, ctx.L :]
    ai = _linear(ai, params, f"{pi}.proj")
    at = _linear(at, params, f"{pt}.proj")
    img = img + ai * mi[2]
    txt = txt + (at * mt[2] if mt[2] is not None else at)

    img = img + _mlp(_modulate(img, mi[3], mi[4]), params, pi) * mi[5]
    mlp_t = _mlp(_modulate(txt, mt[3], mt[4]), params, pt)
    txt = txt + (mlp_t * mt[5] if mt[5] is not None else mlp_t)
    return txt, img


def _single_block(cfg, ctx, params, i, x, c):
    name = f"single{i}"
    m = _modulation(params, name, c, 6)
    h = _modulate(x, m[0], m[1])
    q, k, v = _qkv(cfg, h, params, name)
    x = x + _linear(_attention(cfg, ctx, q, k, v), params, f"{name}.proj") * m[2]
    x = x + _mlp(_modulate(x, m[3], m[4]), params, name) * m[5]
    return x


def check_batch(cfg: ModelConfig, batch: Batch) -> None:
    if batch.text_ids.shape[1] != cfg.text_len:
        raise ConfigMismatch(f"text length {batch.text_ids.shape[1]} != {cfg.text_len}")
    if batch.image_tokens.shape[2] != cfg.token_dim:
        raise ConfigMismatch(f"token width {batch.image_tokens.shape[2]} != {cfg.token_dim}")
    if batch.text_ids.max(initial=0) >= cfg.vocab_size:
        raise ConfigMismatch("text id outside vocabulary")


def forward(params: dict[str, Tensor], cfg: ModelConfig, batch: Batch, t=None) -> Tensor:
    """Velocity prediction for every image token, shape (B, N, 3 p^2).

    Only entries under ``batch.target_mask`` are meaningful. ``t`` overrides
    ``batch.t`` when given.
    """
    check_batch(cfg, batch)
    dtype = params["img.in.w"].dtype
    t = batch.t if t is None else np.broadcast_to(np.asarray(t, dtype=np.float64), batch.t.shape)
    ctx = _Ctx(cfg, batch, dtype)

    txt = tc.embedding(params["txt.embed"], batch.text_ids) + params["txt.pos"]
    img = Tensor(batch.image_tokens.astype(dtype, copy=False), dtype=dtype) @ params["img.in.w"]
    img = img + params["img.in.b"]

    temb = Tensor(timestep_embedding(t, cfg.time_freq_dim), dtype=dtype)
    h = tc.silu(temb @ params["time.w1"] + params["time.b1"])
    c = tc.silu(h @ params["time.w2"] + params["time.b2"])

    for i in range(cfg.depth_dual):
        txt, img = _dual_block(cfg, ctx, params, i, txt, img, c)
    x = tc.concat([txt, img], 1)
    for i in range(cfg.depth_single):
        x = _single_block(cfg, ctx, params, i, x, c)
    img = x[:, ctx.L :]

    shift, scale = _modulation(params, "final", c, 2)
    return _linear(_modulate(img, shift, scale), params, "final")


def predict_velocity(params, cfg: ModelConfig, seq: PackedSequence, t: float | None = None) -> Tensor:
    """Velocity for the target tokens of one packed sequence, shape (target tokens, 3 p^2)."""
    batch = collate([seq])
    out = forward(params, cfg, batch, None if t is None else np.array([t]))
    return out[0, seq.target_slice]
