"""Turn many-to-many samples into token sequences.

Sequence layout is ``[text | refs in order | targets in order]``. Reference
frames carry clean patch tokens, target frames carry the flow-matching
interpolant. Images live in [0, 1] on disk and in [-1, 1] in token space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IndivisibleShape, ShapeMismatch, TooManyFrames
from .rope import RopeConfig, RopeIndexPlan, assign_temporal_indices
from .text import MAX_IMAGES, render_prompt, tokenize_text


@dataclass
class Sample:
    refs: list[np.ndarray]
    targets: list[np.ndarray]
    instruction: str
    task: str = "edit"
    fg_masks: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.refs) > MAX_IMAGES or not (1 <= len(self.targets) <= MAX_IMAGES):
            raise TooManyFrames(
                f"need 0..{MAX_IMAGES} refs and 1..{MAX_IMAGES} targets, "
                f"got {len(self.refs)} and {len(self.targets)}"
            )


@dataclass(frozen=True)
class PackConfig:
    patch: int = 4
    text_len: int = 32
    rope: RopeConfig = field(default_factory=RopeConfig)


@dataclass
class PackedSequence:
    text_ids: np.ndarray  # (text_len,)
    image_tokens: np.ndarray  # (n_image_tokens, 3 p^2)
    rope_plan: RopeIndexPlan
    attn_mask: np.ndarray  # (text_len + n_image_tokens,) bool
    loss_mask: np.ndarray  # same shape, True exactly on target tokens
    frame_spans: list[tuple[int, int]]  # (offset, length) into image_tokens
    n_in: int
    n_out: int
    t: float
    velocity_target: np.ndarray | None = None  # (n_target_tokens, 3 p^2)

    @property
    def length(self) -> int:
        return self.attn_mask.shape[0]

    @property
    def text_len(self) -> int:
        return self.text_ids.shape[0]

    @property
    def target_slice(self) -> slice:
        off = self.frame_spans[self.n_in][0] if self.n_out else self.image_tokens.shape[0]
        return slice(off, self.image_tokens.shape[0])


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """(H, W, C) -> ((H/p)(W/p), p*p*C), row-major patches, each flattened (row, col, channel)."""
    h, w, c = image.shape
    if h % p or w % p:
        raise IndivisibleShape(f"patch {p} does not divide {h}x{w}")
    x = image.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, h: int, w: int, p: int, c: int = 3) -> np.ndarray:
    if h % p or w % p:
        raise IndivisibleShape(f"patch {p} does not divide {h}x{w}")
    gh, gw = h // p, w // p
    if tokens.shape != (gh * gw, p * p * c):
        raise ShapeMismatch(f"tokens {tokens.shape} do not fit a {h}x{w} image")
    x = tokens.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, c)


def to_model_space(image: np.ndarray) -> np.ndarray:
    return image * 2.0 - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0)


def image_tokens(image: np.ndarray, p: int, dtype=np.float32) -> np.ndarray:
    return patchify(to_model_space(np.asarray(image, dtype=np.float64)), p).astype(dtype)


def draw_noise(sample: Sample, p: int, rng: np.random.Generator, dtype=np.float32) -> list[np.ndarray]:
    """Standard normal noise shaped like each target's token array."""
    out = []
    for img in sample.targets:
        h, w = img.shape[:2]
        out.append(rng.standard_normal(((h // p) * (w // p), 3 * p * p)).astype(dtype))
    return out


def pack(
    sample: Sample,
    t: float,
    noise: list[np.ndarray] | None,
    strategy: str = "marginal",
    cfg: PackConfig | None = None,
    drop_caption: bool = False,
    dtype=np.float32,
) -> PackedSequence:
    """Pack one sample. ``noise=None`` packs clean targets (useful at t=0)."""
    from .flow import make_training_pair

    cfg = cfg or PackConfig()
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    p = cfg.patch
    n_in, n_out = len(sample.refs), len(sample.targets)
    frames = list(sample.refs) + list(sample.targets)
    grids = []
    for img in frames:
        h, w = img.shape[:2]
        if h % p or w % p:
            raise IndivisibleShape(f"patch {p} does not divide {h}x{w}")
        grids.append((h // p, w // p))
    plan = assign_temporal_indices(n_in, n_out, strategy, cfg.rope, grids)

    if noise is not None and len(noise) != n_out:
        raise ShapeMismatch(f"{len(noise)} noise arrays for {n_out} targets")

    chunks, spans, velocities = [], [], []
    offset = 0
    for k, img in enumerate(frames):
        tok = image_tokens(img, p, dtype)
        if k >= n_in:
            eps = noise[k - n_in] if noise is not None else np.zeros_like(tok)
            if eps.shape != tok.shape:
                raise ShapeMismatch(f"noise {eps.shape} vs target tokens {tok.shape}")
            tok, v = make_training_pair(tok, eps.astype(dtype), t)
            velocities.append(v)
        chunks.append(tok)
        spans.append((offset, tok.shape[0]))
        offset += tok.shape[0]

    prompt = "" if drop_caption else render_prompt(sample.instruction, n_in, n_out)
    text_ids = tokenize_text(prompt, cfg.text_len)
    n_img = offset
    attn_mask = np.concatenate([text_ids != 0, np.ones(n_img, dtype=bool)])
    loss_mask = np.zeros(cfg.text_len + n_img, dtype=bool)
    if n_out:
        loss_mask[cfg.text_len + spans[n_in][0] :] = True
    return PackedSequence(
        text_ids=text_ids,
        image_tokens=np.concatenate(chunks, axis=0),
        rope_plan=plan,
        attn_mask=attn_mask,
        loss_mask=loss_mask,
        frame_spans=spans,
        n_in=n_in,
        n_out=n_out,
        t=float(t),
        velocity_target=np.concatenate(velocities, axis=0),
    )


@dataclass
class Batch:
    """Padded batch of packed sequences, ready for the model."""

    text_ids: np.ndarray  # (B, L)
    image_tokens: np.ndarray  # (B, N, P)
    positions: np.ndarray  # (B, N, 3) rope positions, zero on padding
    key_mask: np.ndarray  # (B, L + N) True on real tokens
    target_mask: np.ndarray  # (B, N) True on target tokens
    velocity_target: np.ndarray  # (B, N, P), zero off target
    t: np.ndarray  # (B,)


def collate(seqs: list[PackedSequence], pad_to: int | None = None) -> Batch:
    if not seqs:
        raise ValueError("empty batch")
    L = seqs[0].text_len
    P = seqs[0].image_tokens.shape[1]
    n_max = max(s.image_tokens.shape[0] for s in seqs)
    if pad_to is not None:
        if pad_to < n_max:
            raise ValueError(f"pad_to={pad_to} below longest sequence {n_max}")
        n_max = pad_to
    B = len(seqs)
    dtype = seqs[0].image_tokens.dtype
    text = np.zeros((B, L), dtype=np.int64)
    img = np.zeros((B, n_max, P), dtype=dtype)
    pos = np.zeros((B, n_max, 3), dtype=np.int64)
    key = np.zeros((B, L + n_max), dtype=bool)
    tmask = np.zeros((B, n_max), dtype=bool)
    vel = np.zeros((B, n_max, P), dtype=dtype)
    t = np.zeros(B, dtype=np.float64)
    for b, s in enumerate(seqs):
        if s.text_len != L or s.image_tokens.shape[1] != P:
            raise ShapeMismatch("sequences in a batch must share text length and token width")
        n = s.image_tokens.shape[0]
        text[b] = s.text_ids
        img[b, :n] = s.image_tokens
        pos[b, :n] = s.rope_plan.positions
        key[b, : s.length] = s.attn_mask
        tmask[b, :n] = s.loss_mask[L:]
        ts = s.target_slice
        if s.velocity_target is not None:
            vel[b, ts] = s.velocity_target
        t[b] = s.t
    return Batch(text, img, pos, key, tmask, vel, t)
