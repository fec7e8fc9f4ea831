"""Identity-preservation and temporal-consistency scores over masked foregrounds."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import EmptyMask, EmptySet, NeedTwo, ZeroVector

Extractor = Callable[[np.ndarray, np.ndarray], np.ndarray]

THUMB = 8


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = float(np.dot(a, a)), float(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / np.sqrt(na * nb))


def _as_matrix(vectors, what: str) -> np.ndarray:
    m = np.asarray(vectors, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise EmptySet(f"{what} must be a non-empty list of vectors")
    return m


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All pairwise cosines. Identical rows give exactly 1."""
    # elementwise product then a reduction over the same axis for every pair,
    # so equal inputs produce bit-equal dot products
    dots = (a[:, None, :] * b[None, :, :]).sum(-1)
    na = (a * a).sum(-1)
    nb = (b * b).sum(-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroVector("cosine of a zero vector is undefined")
    return dots / np.sqrt(na[:, None] * nb[None, :])


def ip_score(gen_embs, ref_embs) -> float:
    """Mean cosine between every generated and every reference embedding."""
    g = _as_matrix(gen_embs, "generated embeddings")
    r = _as_matrix(ref_embs, "reference embeddings")
    return float(cosine_matrix(g, r).mean())


def tc_score(gen_embs) -> float:
    """Mean cosine over unordered pairs of generated embeddings."""
    g = _as_matrix(gen_embs, "generated embeddings")
    n = g.shape[0]
    if n < 2:
        raise NeedTwo("temporal consistency needs at least two generated images")
    c = cosine_matrix(g, g)
    iu = np.triu_indices(n, k=1)
    return float(c[iu].mean())


def _bin_edges(n: int) -> np.ndarray:
    return (np.arange(THUMB + 1) * n) // THUMB


def default_extractor(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked per-channel mean and variance, then an 8x8 masked grayscale thumbnail.

    The thumbnail cell value is the mean gray level over the whole cell with
    background pixels counted as 0. Output is L2-normalized, length 70.
    """
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    if h < THUMB or w < THUMB:
        raise ValueError(f"image must be at least {THUMB}x{THUMB}")
    px = img[m]
    mean = px.mean(axis=0)
    var = px.var(axis=0)
    gray = np.where(m, img.mean(axis=2), 0.0)
    ye, xe = _bin_edges(h), _bin_edges(w)
    thumb = np.empty((THUMB, THUMB))
    for i in range(THUMB):
        for j in range(THUMB):
            thumb[i, j] = gray[ye[i] : ye[i + 1], xe[j] : xe[j + 1]].mean()
    v = np.concatenate([mean, var, thumb.ravel()])
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def masked_embed(image, mask, extractor: Extractor = default_extractor) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != np.shape(image)[:2]:
        raise ValueError(f"mask {m.shape} does not match image {np.shape(image)[:2]}")
    if not m.any():
        raise EmptyMask("foreground mask is empty")
    return np.asarray(extractor(np.asarray(image), m), dtype=np.float64)


@dataclass
class EvalReport:
    ip: float
    tc: float | None  # None when fewer than two images were generated
    n_generated: int
    n_refs: int
    vlm: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_json() + "\n")


def evaluate(gen_images, gen_masks, ref_images, ref_masks, extractor: Extractor = default_extractor) -> EvalReport:
    if not gen_images or not ref_images:
        raise EmptySet("need at least one generated and one reference image")
    g = [masked_embed(i, m, extractor) for i, m in zip(gen_images, gen_masks, strict=True)]
    r = [masked_embed(i, m, extractor) for i, m in zip(ref_images, ref_masks, strict=True)]
    tc = tc_score(g) if len(g) >= 2 else None
    return EvalReport(ip=ip_score(g, r), tc=tc, n_generated=len(g), n_refs=len(r))
