"""Paired Marginal-vs-Even temporal index runs on a small editing task."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .config import AblationSection
from .data.io import save_image
from .data.scenes import SceneSpec, paired_edit
from .flow import SamplerConfig, fm_loss, sample, sample_train_times
from .model import ModelConfig, forward, init_params
from .packing import Sample, collate, draw_noise, pack
from .train.optim import AdamW, clip_grad_norm

log = logging.getLogger(__name__)


def toy_task(n_train: int, n_val: int, size: int = 16, counts=(1, 2, 3), seed: int = 0):
    """Paired-recolor samples with 1..3 reference/target pairs, cycled through ``counts``."""
    spec = SceneSpec(size=(size, size))
    make = lambda i: paired_edit(spec, np.random.default_rng([seed, i]), counts[i % len(counts)]).sample
    train = [make(i) for i in range(n_train)]
    val = [make(n_train + i) for i in range(n_val)]
    return train, val


def fixed_validation(val: list[Sample], p: int, seed: int, n_t: int = 4):
    """Frozen (sample, t, noise) triples so both strategies see the same targets."""
    rng = np.random.default_rng([seed, 7])
    out = []
    for s in val:
        for t in (np.arange(n_t) + 0.5) / n_t:
            out.append((s, float(t), draw_noise(s, p, rng)))
    return out


def val_loss(params, cfg: ModelConfig, fixed, strategy: str, chunk: int = 16) -> float:
    total, count = 0.0, 0
    with tc.no_grad():
        for k in range(0, len(fixed), chunk):
            part = fixed[k : k + chunk]
            b = collate([pack(s, t, e, strategy, cfg.pack_config) for s, t, e in part])
            n = int(b.target_mask.sum())
            total += float(fm_loss(forward(params, cfg, b), b.velocity_target, b.target_mask).data) * n
            count += n
    return total / count


def train_strategy(strategy: str, train: list[Sample], fixed, cfg: ModelConfig, sec: AblationSection, seed: int):
    params = init_params(cfg, seed)
    opt = AdamW(params, lr=sec.lr)
    rng = np.random.default_rng([seed, 1])
    warm = max(1, sec.steps // 20)
    curve, train_losses = [], []
    for step in range(sec.steps):
        idx = rng.choice(len(train), size=min(sec.batch, len(train)), replace=False)
        ts = sample_train_times(rng, len(idx))
        seqs = [pack(train[i], float(t), draw_noise(train[i], cfg.patch, rng), strategy, cfg.pack_config)
                for i, t in zip(idx, ts)]
        b = collate(seqs)
        loss = fm_loss(forward(params, cfg, b), b.velocity_target, b.target_mask)
        tc.backward(loss)
        clip_grad_norm(params, 1.0)
        opt.step(sec.lr * min(1.0, (step + 1) / warm))
        opt.zero_grad()
        train_losses.append(float(loss.data))
        if (step + 1) % sec.eval_every == 0 or step + 1 == sec.steps:
            curve.append((step + 1, val_loss(params, cfg, fixed, strategy)))
            log.info("%s step %d val %.5f", strategy, step + 1, curve[-1][1])
    return params, curve, train_losses


@dataclass
class AblationResult:
    steps: list[int]
    marginal: list[float]
    even: list[float]
    params: dict
    val: list[Sample]

    @property
    def final(self) -> tuple[float, float]:
        return self.marginal[-1], self.even[-1]


def rope_ablation(sec: AblationSection | None = None, seed: int = 0, cfg: ModelConfig | None = None) -> AblationResult:
    sec = sec or AblationSection()
    cfg = cfg or ModelConfig()
    train, val = toy_task(sec.n_train, sec.n_val, sec.size, tuple(sec.counts), seed)
    fixed = fixed_validation(val, cfg.patch, seed)
    curves, params = {}, {}
    for strategy in ("marginal", "even"):
        params[strategy], curves[strategy], _ = train_strategy(strategy, train, fixed, cfg, sec, seed)
    steps = [s for s, _ in curves["marginal"]]
    return AblationResult(
        steps, [v for _, v in curves["marginal"]], [v for _, v in curves["even"]], params, val
    )


def image_grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile equally sized images; short rows are padded with white."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    grid = np.ones((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y : y + h, x : x + w] = img
    return grid


def write_ablation(result: AblationResult, out_dir, cfg: ModelConfig | None = None, seed: int = 0) -> None:
    cfg = cfg or ModelConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rope_ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "marginal_val_loss", "even_val_loss"))
        for s, a, b in zip(result.steps, result.marginal, result.even):
            w.writerow((s, f"{a:.9g}", f"{b:.9g}"))
    # one example per pair count: refs, ground truth, marginal output, even output
    rows = []
    scfg = SamplerConfig(steps=50, cfg_scale=1.0, seed=seed)
    seen = set()
    for s in result.val:
        if len(s.refs) in seen:
            continue
        seen.add(len(s.refs))
        rows.append(list(s.refs))
        rows.append(list(s.targets))
        for strategy in ("marginal", "even"):
            rows.append(sample(result.params[strategy], cfg, s.refs, s.instruction, len(s.targets), scfg,
                               strategy=strategy))
    save_image(out / "rope_ablation.png", image_grid(rows))
