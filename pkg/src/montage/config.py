"""JSON run configuration. Unknown keys are rejected at every level."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data.buckets import DEFAULT_BUCKETS, DESK_BUCKETS
from .data.scenes import TASKS, SceneSpec
from .errors import ConfigError
from .flow import SamplerConfig
from .model import ModelConfig
from .train.loop import TrainConfig
from .train.schedule import DIFFICULTY, StagePlan


@dataclass
class CorpusSection:
    n: int = 64
    size: tuple[int, int] = (32, 32)
    tasks: tuple[str, ...] = TASKS
    max_out: int = 3
    motion_threshold: float = 0.0
    motion_upweight: float = 1.0
    workers: int = 1


@dataclass
class TrainSection:
    plan: str = "desk"  # "desk" or "full"
    stage_steps: tuple[int, int, int] | None = None
    lr: float | None = None
    multi_tasks: tuple[str, ...] = DIFFICULTY
    token_budget: int = 512
    batch_cap: int = 8
    caption_dropout: float = 0.1
    strategy: str = "marginal"
    checkpoint_every: int = 0
    max_steps: int | None = None


@dataclass
class AblationSection:
    steps: int = 600
    n_train: int = 48
    n_val: int = 12
    size: int = 16
    lr: float = 1e-3
    batch: int = 8
    eval_every: int = 50
    counts: tuple[int, ...] = (1, 2, 3)


@dataclass
class PathsSection:
    data: str | None = None  # manifest for train
    hq_data: str | None = None  # optional manifest slice for the HQ stage
    checkpoint: str | None = None  # for sample


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    train: TrainSection = field(default_factory=TrainSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    paths: PathsSection = field(default_factory=PathsSection)
    buckets: str | list = "desk"  # "desk", "default" or a list of [h, w]

    def model_config(self) -> ModelConfig:
        return _strict(ModelConfig, self.model, "model")

    def sampler_config(self) -> SamplerConfig:
        return _strict(SamplerConfig, self.sampler, "sampler")

    def bucket_dims(self) -> list[tuple[int, int]]:
        if self.buckets == "desk":
            return list(DESK_BUCKETS)
        if self.buckets == "default":
            return list(DEFAULT_BUCKETS)
        try:
            return [(int(h), int(w)) for h, w in self.buckets]
        except (TypeError, ValueError):
            raise ConfigError("buckets must be 'desk', 'default' or a list of [height, width]") from None

    def scene_spec(self) -> SceneSpec:
        c = self.corpus
        return SceneSpec(size=tuple(c.size), tasks=tuple(c.tasks), max_out=c.max_out)

    def train_config(self) -> TrainConfig:
        t = self.train
        kw = {"multi_tasks": tuple(t.multi_tasks)}
        if t.stage_steps is not None:
            kw["steps"] = tuple(t.stage_steps)
        if t.lr is not None:
            kw["lr"] = t.lr
        if t.plan == "desk":
            plan = StagePlan.desk(**kw)
        elif t.plan == "full":
            plan = StagePlan.full(**kw)
        else:
            raise ConfigError(f"train.plan must be 'desk' or 'full', got {t.plan!r}")
        if t.strategy not in ("marginal", "even"):
            raise ConfigError(f"unknown rope strategy {t.strategy!r}")
        return TrainConfig(
            model=self.model_config(), plan=plan, buckets=self.bucket_dims(),
            token_budget=t.token_budget, batch_cap=t.batch_cap, caption_dropout=t.caption_dropout,
            strategy=t.strategy, checkpoint_every=t.checkpoint_every, max_steps=t.max_steps,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


_SECTIONS = {"train": TrainSection, "corpus": CorpusSection, "ablation": AblationSection, "paths": PathsSection}


def parse_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    d = dict(d)
    for key, cls in _SECTIONS.items():
        if key in d:
            d[key] = _strict(cls, d[key], key)
    cfg = _strict(RunConfig, d, "config")
    # validate the nested configs eagerly so errors surface at load time
    cfg.model_config()
    cfg.sampler_config()
    cfg.bucket_dims()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return parse_config(raw)
