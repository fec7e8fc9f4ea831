"""Task-mixture schedules, stage presets and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..errors import ConfigError, StepOutOfRange

STRATEGIES = ("flat", "stage", "cocktail", "pretrain")

MANY_TO_ONE = ("multi_cref", "cond_cref", "sref")
MANY_OUT = ("multi_turn", "multi_view", "storyboard")
# easiest first; used as the default cocktail order
DIFFICULTY = ("multi_view", "multi_turn", "sref", "cond_cref", "multi_cref", "storyboard")


@dataclass
class MixSchedule:
    """Per-step sampling probabilities over tasks.

    ``tasks`` are in difficulty order for ``cocktail``. ``sizes`` feed the
    size-proportional weights of ``flat`` and ``stage``. ``reserve`` pins
    fixed probabilities for extra tasks; the scheduled tasks share the rest.
    For ``pretrain`` the tasks are ``(video, edit)`` and the video share goes
    linearly from ``start`` to ``end`` over the stage.
    """

    strategy: str
    tasks: tuple[str, ...]
    steps: int
    sizes: tuple[float, ...] | None = None
    intro_steps: tuple[int, ...] | None = None
    phase_step: int | None = None
    first_phase: tuple[str, ...] = MANY_TO_ONE
    reserve: dict[str, float] = field(default_factory=dict)
    newest: float = 0.8
    start: float = 0.75
    end: float = 0.25

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown mix strategy {self.strategy!r}")
        if not self.tasks:
            raise ConfigError("schedule needs at least one task")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("duplicate task names")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.sizes is not None:
            self.sizes = tuple(float(s) for s in self.sizes)
            if len(self.sizes) != len(self.tasks) or any(s <= 0 for s in self.sizes):
                raise ConfigError("sizes must be positive, one per task")
        if any(w < 0 for w in self.reserve.values()) or sum(self.reserve.values()) > 1.0:
            raise ConfigError("reserve weights must be non-negative and sum to at most 1")
        if set(self.reserve) & set(self.tasks):
            raise ConfigError("reserved tasks cannot also be scheduled")
        if self.strategy == "pretrain" and len(self.tasks) != 2:
            raise ConfigError("pretrain schedule takes exactly (video, edit)")
        if self.strategy == "cocktail":
            if self.intro_steps is None:
                n = len(self.tasks)
                self.intro_steps = tuple(k * self.steps // n for k in range(n))
            self.intro_steps = tuple(int(s) for s in self.intro_steps)
            if len(self.intro_steps) != len(self.tasks) or self.intro_steps[0] != 0:
                raise ConfigError("intro_steps need one entry per task, starting at 0")
            if list(self.intro_steps) != sorted(self.intro_steps):
                raise ConfigError("intro_steps must be non-decreasing")
        if self.strategy == "stage":
            if self.phase_step is None:
                self.phase_step = self.steps // 2
            if not any(t in self.first_phase for t in self.tasks):
                raise ConfigError("stage schedule has no first-phase task")

    @property
    def all_tasks(self) -> tuple[str, ...]:
        return self.tasks + tuple(sorted(self.reserve))


def _proportional(tasks, sizes) -> dict[str, float]:
    if sizes is None:
        return {t: 1.0 / len(tasks) for t in tasks}
    total = math.fsum(sizes)
    return {t: s / total for t, s in zip(tasks, sizes)}


def _core_weights(s: MixSchedule, step) -> dict[str, float]:
    if len(s.tasks) == 1:
        return {s.tasks[0]: 1.0}
    if s.strategy == "flat":
        return _proportional(s.tasks, s.sizes)
    if s.strategy == "stage":
        if step < s.phase_step:
            active = [k for k, t in enumerate(s.tasks) if t in s.first_phase]
        else:
            active = list(range(len(s.tasks)))
        sizes = None if s.sizes is None else [s.sizes[k] for k in active]
        w = dict.fromkeys(s.tasks, 0.0)
        w.update(_proportional([s.tasks[k] for k in active], sizes))
        return w
    if s.strategy == "cocktail":
        n_active = sum(1 for i in s.intro_steps if i <= step)
        w = dict.fromkeys(s.tasks, 0.0)
        if n_active == 1:
            w[s.tasks[0]] = 1.0
            return w
        rest = (1.0 - s.newest) / (n_active - 1)
        for t in s.tasks[: n_active - 1]:
            w[t] = rest
        w[s.tasks[n_active - 1]] = s.newest
        return w
    # pretrain
    progress = step / (s.steps - 1) if s.steps > 1 else 0.0
    video = s.start + (s.end - s.start) * progress
    return {s.tasks[0]: video, s.tasks[1]: 1.0 - video}


def mix_weights(schedule: MixSchedule, step) -> dict[str, float]:
    """Sampling probability per task at ``step`` (0-based, within the stage)."""
    if not 0 <= step <= schedule.steps - 1:
        raise StepOutOfRange(f"step {step} outside [0, {schedule.steps - 1}]")
    scale = 1.0 - math.fsum(schedule.reserve.values())
    w = {t: v * scale for t, v in _core_weights(schedule, step).items()}
    w.update(schedule.reserve)
    return w


@dataclass
class StageSpec:
    name: str
    lr: float
    schedule: str  # "constant" or "cosine"
    warmup: int
    weight_decay: float
    steps: int
    mix: MixSchedule
    grad_clip: float = 1.0
    shift: float = 5.0
    hq: bool = False  # draw from the high-quality manifest slice

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.steps < 1 or self.warmup < 0 or self.warmup >= self.steps:
            raise ConfigError(f"stage {self.name}: need 0 <= warmup < steps")
        if self.mix.steps != self.steps:
            raise ConfigError(f"stage {self.name}: mix schedule length differs from stage length")


@dataclass
class StagePlan:
    stages: list[StageSpec]

    def stage(self, key) -> StageSpec:
        if isinstance(key, int):
            if not 1 <= key <= len(self.stages):
                raise StepOutOfRange(f"no stage {key}")
            return self.stages[key - 1]
        for s in self.stages:
            if s.name == key:
                return s
        raise KeyError(key)

    @classmethod
    def full(cls, steps=(50_000, 15_000, 2_000), lr: float = 1e-5,
             multi_tasks=DIFFICULTY) -> "StagePlan":
        """The three-stage recipe at full length: pretrain, cocktail SFT, HQ anneal."""
        s1, s2, s3 = steps
        return cls([
            StageSpec("pretrain", lr, "constant", 1000 if s1 > 1000 else 0, 0.0, s1,
                      MixSchedule("pretrain", ("video", "edit"), s1)),
            StageSpec("sft", lr, "constant", 500 if s2 > 500 else 0, 0.01, s2,
                      MixSchedule("cocktail", tuple(multi_tasks), s2, reserve={"edit": 0.1})),
            StageSpec("hq", lr, "cosine", 0, 0.01, s3,
                      MixSchedule("flat", tuple(multi_tasks), s3, reserve={"edit": 0.5}), hq=True),
        ])

    @classmethod
    def desk(cls, steps=(60, 60, 30), lr: float = 1e-3, multi_tasks=DIFFICULTY) -> "StagePlan":
        """Same shape as ``full`` with short stages and warmups scaled to match."""
        s1, s2, s3 = steps
        return cls([
            StageSpec("pretrain", lr, "constant", s1 // 50, 0.0, s1,
                      MixSchedule("pretrain", ("video", "edit"), s1)),
            StageSpec("sft", lr, "constant", s2 // 30, 0.01, s2,
                      MixSchedule("cocktail", tuple(multi_tasks), s2, reserve={"edit": 0.1})),
            StageSpec("hq", lr, "cosine", 0, 0.01, s3,
                      MixSchedule("flat", tuple(multi_tasks), s3, reserve={"edit": 0.5}), hq=True),
        ])


def lr_at(plan: StagePlan, stage, step: int) -> float:
    """Linear warmup from 0, then constant or cosine-to-zero at the last step."""
    st = plan.stage(stage)
    if not 0 <= step <= st.steps - 1:
        raise StepOutOfRange(f"step {step} outside [0, {st.steps - 1}]")
    if step < st.warmup:
        return st.lr * step / st.warmup
    if st.schedule == "constant":
        return st.lr
    span = st.steps - 1 - st.warmup
    progress = (step - st.warmup) / span if span > 0 else 1.0
    return st.lr * (1.0 + math.cos(math.pi * progress)) / 2.0
