"""Aspect-ratio buckets and token-budget batching."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..errors import BudgetTooSmall


@dataclass(frozen=True)
class Bucket:
    height: int
    width: int
    patch: int = 16
    batch_size: int = 1

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"{self.height}x{self.width} not a multiple of patch {self.patch}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def token_count(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def aspect(self) -> float:
        return self.height / self.width


def _base_variants(bases, delta):
    out = []
    for b in bases:
        for dh in (-delta, 0, delta):
            for dw in (-delta, 0, delta):
                out.append((b + dh, b + dw))
    return out


# (height, width)
DEFAULT_BUCKETS: list[tuple[int, int]] = _base_variants((512, 768, 1024), 32) + [
    (1024, 640), (640, 1024), (1024, 576), (576, 1024), (768, 512),
    (512, 768), (896, 512), (512, 896), (1280, 512), (512, 1280),
]

DESK_BUCKETS: list[tuple[int, int]] = _base_variants((16, 32, 64), 8) + [
    (32, 16), (16, 32), (64, 32), (32, 64),
]


def make_buckets(dims=None, patch: int = 16) -> list[Bucket]:
    return [Bucket(h, w, patch) for h, w in (dims or DEFAULT_BUCKETS)]


def assign_bucket_index(h: int, w: int, buckets) -> int:
    """Nearest log-aspect, then nearest area, then listing order."""
    if not buckets:
        raise ValueError("bucket list is empty")
    if h <= 0 or w <= 0:
        raise ValueError("image dims must be positive")
    la, area = math.log(h / w), h * w
    best, best_key = 0, None
    for i, b in enumerate(buckets):
        bh, bw = (b.height, b.width) if isinstance(b, Bucket) else b
        key = (abs(la - math.log(bh / bw)), abs(area - bh * bw))
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


def assign_bucket(h: int, w: int, buckets):
    return buckets[assign_bucket_index(h, w, buckets)]


def resize_to_bucket(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Short-side resize so the image covers the bucket, then center-crop."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image
    s = max(height / h, width / w)
    nh, nw = max(height, round(h * s)), max(width, round(w * s))
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr).resize((nw, nh), Image.BICUBIC)
    out = np.asarray(im, dtype=np.float64) / 255.0
    top, left = (nh - height) // 2, (nw - width) // 2
    return out[top : top + height, left : left + width]


def batch_size_for(tokens_per_sample: int, token_budget: int, cap: int = 64) -> int:
    """round(budget / tokens) clamped to [1, cap]."""
    if token_budget < tokens_per_sample:
        raise BudgetTooSmall(f"budget {token_budget} < one sample's {tokens_per_sample} tokens")
    return int(min(cap, max(1, math.floor(token_budget / tokens_per_sample + 0.5))))


@dataclass
class PlannedBatch:
    bucket: int
    batch_size: int
    indices: list[int]


def batch_plan(
    records,
    buckets: list[Bucket],
    token_budget: int,
    frames_per_sample=None,
    cap: int = 64,
    rng: np.random.Generator | None = None,
) -> list[PlannedBatch]:
    """Group records by bucket and cut each group into equal-token batches.

    ``records`` need a ``bucket`` attribute. ``frames_per_sample(record)``
    gives the number of images a record contributes (default 1). Batches are
    ordered by bucket listing order unless ``rng`` shuffles them.
    """
    groups: OrderedDict[int, list[int]] = OrderedDict()
    for i, r in enumerate(records):
        groups.setdefault(r.bucket, []).append(i)
    out = []
    for b in sorted(groups):
        idx = groups[b]
        frames = max(frames_per_sample(records[i]) if frames_per_sample else 1 for i in idx)
        bs = batch_size_for(buckets[b].token_count * frames, token_budget, cap)
        for k in range(0, len(idx), bs):
            out.append(PlannedBatch(bucket=b, batch_size=bs, indices=idx[k : k + bs]))
    if rng is not None:
        order = rng.permutation(len(out))
        out = [out[i] for i in order]
    return out
