"""Staged training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as tc
from ..data.buckets import DESK_BUCKETS, batch_plan, make_buckets, resize_to_bucket
from ..data.io import ManifestRecord, load_image, resolve
from ..errors import EmptyTask, NonFiniteLoss
from ..flow import fm_loss, sample_train_times
from ..model import ModelConfig, forward, init_params
from ..packing import Sample, collate, draw_noise, pack
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import AdamW, clip_grad_norm
from .schedule import StagePlan, lr_at, mix_weights

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "task", "bucket", "loss", "lr", "grad_norm")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: StagePlan = field(default_factory=StagePlan.desk)
    buckets: list = field(default_factory=lambda: list(DESK_BUCKETS))
    token_budget: int = 512  # image tokens per batch
    batch_cap: int = 8
    caption_dropout: float = 0.1
    strategy: str = "marginal"
    checkpoint_every: int = 0  # 0: final checkpoint only
    max_steps: int | None = None  # stop early across stages
    run_digest: str | None = None  # digest of the run config, stored in checkpoints


def load_sample(record: ManifestRecord, manifest_path, bucket: tuple[int, int] | None = None) -> Sample:
    def get(rel):
        img = load_image(resolve(manifest_path, rel))
        return resize_to_bucket(img, *bucket) if bucket else img

    return Sample(
        refs=[get(p) for p in record.ref_paths],
        targets=[get(p) for p in record.target_paths],
        instruction=record.instruction,
        task=record.task,
    )


class _TaskStream:
    """Endless supply of bucket batches for one task, replanned each pass."""

    def __init__(self, records, buckets, cfg: TrainConfig, rng):
        self.records, self.buckets, self.cfg, self.rng = records, buckets, cfg, rng
        self.queue = []

    def next(self):
        if not self.queue:
            self.queue = batch_plan(
                self.records, self.buckets, self.cfg.token_budget,
                frames_per_sample=lambda r: len(r.ref_paths) + len(r.target_paths),
                cap=self.cfg.batch_cap, rng=self.rng,
            )
        return self.queue.pop(0)


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, tc.Tensor]:
    return {k: tc.Tensor(v.copy(), requires_grad=True, dtype=v.dtype) for k, v in arrays.items()}


def make_checkpoint(params, cfg: TrainConfig, step: int, rng, opt: AdamW | None) -> Checkpoint:
    moments = None
    if opt is not None:
        moments = {f"m/{k}": v for k, v in opt.m.items()} | {f"v/{k}": v for k, v in opt.v.items()}
    return Checkpoint(
        tensors={k: p.data for k, p in params.items()},
        digest=cfg.model.digest(),
        step=step,
        meta={"model": cfg.model.to_dict(), "rng": rng.bit_generator.state, "run_config": cfg.run_digest},
        opt_step=opt.t if opt is not None else None,
        moments=moments,
    )


def train(
    cfg: TrainConfig,
    records: list[ManifestRecord],
    manifest_path,
    out_dir,
    seed: int = 0,
    hq_records: list[ManifestRecord] | None = None,
):
    """Run every stage of ``cfg.plan``. Writes ``loss.csv`` and checkpoints to ``out_dir``.

    Returns ``(params, rows)`` where rows mirror the CSV log. HQ stages draw
    from ``hq_records`` when given, otherwise from ``records``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    params = init_params(cfg.model, seed)
    opt = AdamW(params)
    buckets = make_buckets(cfg.buckets, patch=cfg.model.patch)

    pools = {False: {}, True: {}}
    for hq, recs in ((False, records), (True, hq_records or records)):
        for r in recs:
            pools[hq].setdefault(r.task, []).append(r)
    for st in cfg.plan.stages:
        for task in st.mix.all_tasks:
            if not pools[st.hq].get(task):
                raise EmptyTask(f"stage {st.name} schedules task {task!r} with no records")

    cache: dict[str, Sample] = {}

    def get_sample(r: ManifestRecord) -> Sample:
        key = r.id or r.ref_paths[0]
        if key not in cache:
            b = buckets[r.bucket]
            cache[key] = load_sample(r, manifest_path, (b.height, b.width))
        return cache[key]

    streams: dict[tuple[bool, str], _TaskStream] = {}
    rows = []
    step = 0
    ckpt_path = out / "final.imtg"
    last_good = make_checkpoint(params, cfg, 0, rng, opt)
    budget = cfg.max_steps if cfg.max_steps is not None else sum(s.steps for s in cfg.plan.stages)
    f = open(out / "loss.csv", "w", newline="")
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    try:
        for st in cfg.plan.stages:
            opt.weight_decay = st.weight_decay
            names = st.mix.all_tasks
            for k in range(st.steps):
                if step >= budget:
                    break
                w = mix_weights(st.mix, k)
                probs = np.array([w[t] for t in names])
                task = names[int(rng.choice(len(names), p=probs / probs.sum()))]
                key = (st.hq, task)
                if key not in streams:
                    streams[key] = _TaskStream(pools[st.hq][task], buckets, cfg, rng)
                planned = streams[key].next()
                pool = pools[st.hq][task]
                samples = [get_sample(pool[i]) for i in planned.indices]

                ts = sample_train_times(rng, len(samples), st.shift)
                seqs = []
                for s, t in zip(samples, ts):
                    noise = draw_noise(s, cfg.model.patch, rng)
                    drop = bool(rng.random() < cfg.caption_dropout)
                    seqs.append(pack(s, float(t), noise, cfg.strategy, cfg.model.pack_config, drop_caption=drop))
                batch = collate(seqs)
                loss = fm_loss(forward(params, cfg.model, batch), batch.velocity_target, batch.target_mask)
                lval = float(loss.data)
                if not math.isfinite(lval):
                    tc.get_tape().clear()
                    if all(np.all(np.isfinite(p.data)) for p in params.values()):
                        last_good = make_checkpoint(params, cfg, step, rng, opt)
                    save_checkpoint(ckpt_path, last_good)
                    raise NonFiniteLoss(f"loss {lval} at step {step}; saved last good checkpoint")
                tc.backward(loss)
                gnorm = clip_grad_norm(params, st.grad_clip)
                lr = lr_at(cfg.plan, cfg.plan.stages.index(st) + 1, k)
                opt.step(lr)
                opt.zero_grad()
                step += 1
                row = (step, task, planned.bucket, f"{lval:.9g}", f"{lr:.9g}", f"{gnorm:.9g}")
                writer.writerow(row)
                rows.append(row)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    last_good = make_checkpoint(params, cfg, step, rng, opt)
                    save_checkpoint(out / f"step{step:07d}.imtg", last_good)
                if step % 100 == 0:
                    log.info("step %d task %s loss %.4f lr %.3g", step, task, lval, lr)
    except KeyboardInterrupt:
        save_checkpoint(ckpt_path, make_checkpoint(params, cfg, step, rng, opt))
        raise
    finally:
        f.close()
    save_checkpoint(ckpt_path, make_checkpoint(params, cfg, step, rng, opt))
    return params, rows


def load_params(path, model_cfg: ModelConfig | None = None) -> tuple[dict[str, tc.Tensor], ModelConfig]:
    """Parameters and model config from a checkpoint; checks the digest when a config is given."""
    ck = load_checkpoint(path, model_cfg.digest() if model_cfg is not None else None)
    if model_cfg is None:
        model_cfg = ModelConfig.from_dict(ck.meta["model"])
        if model_cfg.digest() != ck.digest:
            raise ValueError("embedded model config does not match the checkpoint digest")
    return params_from_arrays(ck.tensors), model_cfg
