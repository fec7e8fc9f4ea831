"""Block-matching motion estimation, motion filtering and cross-transition pairs."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import IndivisibleShape, ShapeMismatch

log = logging.getLogger(__name__)


def _gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    return f.mean(axis=2) if f.ndim == 3 else f


def _displacements(radius: int) -> list[tuple[int, int]]:
    d = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # smallest magnitude first, so ties resolve towards no motion
    d.sort(key=lambda v: (v[0] * v[0] + v[1] * v[1], v))
    return d


def block_motion(frame_a, frame_b, block: int = 8, radius: int = 7) -> np.ndarray:
    """Per-block integer displacement (dy, dx) carrying ``frame_a`` content to ``frame_b``.

    Cost is the mean absolute difference over the part of the displaced block
    that stays inside ``frame_b``, so edge blocks can still follow content
    that partly leaves the frame.
    """
    a, b = _gray(frame_a), _gray(frame_b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"frame shapes differ: {a.shape} vs {b.shape}")
    H, W = a.shape
    if H % block or W % block:
        raise IndivisibleShape(f"block {block} does not divide {H}x{W}")
    r = radius
    bpad = np.full((H + 2 * r, W + 2 * r), np.nan)
    bpad[r : r + H, r : r + W] = b
    gh, gw = H // block, W // block
    best = np.full((gh, gw), np.inf)
    vec = np.zeros((gh, gw, 2), dtype=np.int64)
    for dy, dx in _displacements(r):
        shifted = bpad[r + dy : r + dy + H, r + dx : r + dx + W]
        diff = np.abs(a - shifted)
        valid = ~np.isnan(diff)
        diff = np.where(valid, diff, 0.0)
        s = diff.reshape(gh, block, gw, block).sum(axis=(1, 3))
        n = valid.reshape(gh, block, gw, block).sum(axis=(1, 3))
        cost = np.where(n > 0, s / np.maximum(n, 1), np.inf)
        better = cost < best
        best = np.where(better, cost, best)
        vec[better] = (dy, dx)
    return vec


def motion_score(frame_a, frame_b, block: int = 8, radius: int = 7) -> float:
    """Mean Euclidean length of the block motion field, in pixels."""
    v = block_motion(frame_a, frame_b, block, radius).astype(np.float64)
    return float(np.mean(np.hypot(v[..., 0], v[..., 1])))


def filter_pairs(records, threshold: float, upweight: float = 1.0) -> list:
    """Keep records whose ``motion_score`` is at least ``threshold``; scale their weight.

    Returns copies; the input list is not modified.
    """
    kept = []
    for r in records:
        if r.motion_score is None:
            raise ValueError(f"record {getattr(r, 'id', '?')} has no motion_score")
        if r.motion_score >= threshold:
            r2 = copy.copy(r)
            r2.weight = r.weight * upweight
            kept.append(r2)
    if records and not kept:
        log.warning("motion filter at threshold %.3f removed all %d records", threshold, len(records))
    return kept


@dataclass
class FramePair:
    frame_a: np.ndarray
    frame_b: np.ndarray
    index_a: int  # position in the spliced stream
    index_b: int
    clip_a: int  # source clip ids
    clip_b: int
    transition: bool


def splice(clips, rng: np.random.Generator):
    """Concatenate clips in random order. Returns frames, per-frame clip ids and splice points."""
    order = rng.permutation(len(clips))
    frames, owner, splices = [], [], []
    for k, ci in enumerate(order):
        if k > 0:
            splices.append(len(frames))
        for f in clips[ci]:
            frames.append(f)
            owner.append(int(ci))
    return frames, owner, splices


def cross_transition_pairs(clips, seed: int = 0, gap: int = 1, stride: int = 1) -> list[FramePair]:
    """Re-clip the spliced stream into (t, t + gap) pairs at a fixed stride, ignoring content.

    A pair is tagged ``transition`` when a splice point ``s`` satisfies
    ``index_a < s <= index_b``.
    """
    if gap < 1 or stride < 1:
        raise ValueError("gap and stride must be >= 1")
    rng = np.random.default_rng(seed)
    frames, owner, splices = splice(clips, rng)
    pairs = []
    for o in range(0, len(frames) - gap, stride):
        e = o + gap
        crosses = any(o < s <= e for s in splices)
        pairs.append(FramePair(frames[o], frames[e], o, e, owner[o], owner[e], crosses))
    return pairs
