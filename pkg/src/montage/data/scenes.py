"""Procedural many-to-many corpus: flat shapes on programmatic backgrounds.

Every record is rendered from a small scene description with exact
foreground masks. Instructions come from a closed grammar whose words are
all in the tokenizer vocabulary. Task families mirror the real ones:

    edit, multi_turn, multi_view, storyboard    (one or more outputs)
    multi_cref, cond_cref, sref                 (many inputs, one output)
    video                                        (frame pairs from a moving clip)
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..packing import Sample
from ..text import BACKGROUNDS, COLORS, SHAPES
from .buckets import assign_bucket_index
from .io import ManifestRecord, save_image, save_mask, write_manifest
from .motion import motion_score

RGB = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.75, 0.2), "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.9, 0.1), "cyan": (0.1, 0.85, 0.9), "magenta": (0.85, 0.1, 0.8),
    "orange": (0.95, 0.55, 0.1), "purple": (0.5, 0.15, 0.7), "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05), "gray": (0.5, 0.5, 0.5), "pink": (0.98, 0.6, 0.75),
}

MANY_TO_ONE = ("multi_cref", "cond_cref", "sref")
MANY_OUT = ("multi_turn", "multi_view", "storyboard")
TASKS = ("edit",) + MANY_TO_ONE + MANY_OUT + ("video",)
MOTIONS = ("translate", "rotate", "scale", "recolor", "scene-cut")


@dataclass(frozen=True)
class SceneSpec:
    size: tuple[int, int] = (32, 32)  # (height, width)
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLORS
    backgrounds: tuple[str, ...] = BACKGROUNDS
    motions: tuple[str, ...] = MOTIONS
    tasks: tuple[str, ...] = TASKS
    max_out: int = 3
    edit_ops: tuple[str, ...] = ("recolor", "translate", "rotate", "scale")


@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    cy: float
    cx: float
    radius: float
    angle: float = 0.0  # degrees


@dataclass(frozen=True)
class Background:
    program: str
    c1: str
    c2: str
    period: int = 8


def shape_mask(obj: Obj, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = yy - obj.cy, xx - obj.cx
    th = math.radians(obj.angle)
    # rotate sample points into the object's frame
    ry = math.cos(th) * dy - math.sin(th) * dx
    rx = math.sin(th) * dy + math.cos(th) * dx
    r = obj.radius
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        s = r / math.sqrt(2.0)
        return (np.abs(rx) <= s) & (np.abs(ry) <= s)
    if obj.shape == "triangle":
        inside = np.ones((h, w), dtype=bool)
        for k in range(3):
            a = math.radians(90 + 120 * k + 60)  # outward normal of each edge
            inside &= (rx * math.cos(a) - ry * math.sin(a)) <= r * 0.5
        return inside
    raise ValueError(f"unknown shape {obj.shape!r}")


def render_background(bg: Background, h: int, w: int) -> np.ndarray:
    c1, c2 = np.array(RGB[bg.c1]), np.array(RGB[bg.c2])
    if bg.program == "solid":
        return np.broadcast_to(c1, (h, w, 3)).copy()
    xx = np.arange(w)[None, :].repeat(h, 0)
    yy = np.arange(h)[:, None].repeat(w, 1)
    if bg.program == "gradient":
        a = (xx / max(w - 1, 1))[..., None]
        return (1 - a) * c1 + a * c2
    if bg.program == "stripes":
        m = ((xx // max(bg.period // 2, 1)) % 2).astype(bool)[..., None]
        return np.where(m, c2, c1)
    if bg.program == "checker":
        m = (((xx // bg.period) + (yy // bg.period)) % 2).astype(bool)[..., None]
        return np.where(m, c2, c1)
    raise ValueError(f"unknown background program {bg.program!r}")


def render(bg: Background, objs: list[Obj], h: int, w: int):
    """Composite objects over the background. Returns (image, union foreground mask)."""
    img = render_background(bg, h, w)
    fg = np.zeros((h, w), dtype=bool)
    for o in objs:
        m = shape_mask(o, h, w)
        img[m] = RGB[o.color]
        fg |= m
    return img, fg


class _Gen:
    """Draws scene elements from a seeded generator."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        self.spec, self.rng = spec, rng
        self.h, self.w = spec.size

    def pick(self, seq, exclude=()):
        opts = [s for s in seq if s not in exclude]
        return opts[int(self.rng.integers(len(opts)))]

    def obj(self, exclude_colors=(), scale: float = 1.0) -> Obj:
        m = min(self.h, self.w)
        r = float(self.rng.uniform(0.18, 0.26) * m * scale)
        margin = r + 1
        return Obj(
            shape=self.pick(self.spec.shapes),
            color=self.pick(self.spec.colors, exclude_colors),
            cy=float(self.rng.uniform(margin, self.h - margin)),
            cx=float(self.rng.uniform(margin, self.w - margin)),
            radius=r,
            angle=float(self.rng.integers(0, 12) * 15),
        )

    def bg(self, program=None, exclude_colors=()) -> Background:
        c1 = self.pick(self.spec.colors, exclude_colors)
        c2 = self.pick(self.spec.colors, tuple(exclude_colors) + (c1,))
        return Background(program or self.pick(self.spec.backgrounds), c1, c2, 8)

    def plain_bg(self, exclude_colors=()) -> Background:
        c = self.pick(("gray", "white", "black"), exclude_colors)
        return Background("solid", c, c)

    def step(self) -> int:
        return int(self.rng.integers(2, 5)) * 2

    def clamp(self, o: Obj) -> Obj:
        r = o.radius + 1
        return replace(o, cy=min(max(o.cy, r), self.h - r), cx=min(max(o.cx, r), self.w - r))


_DIRS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}


def _apply_op(g: _Gen, o: Obj, op: str, ref: str):
    """Apply one edit op. Returns (new object, instruction fragment)."""
    if op == "recolor":
        c = g.pick(g.spec.colors, (o.color,))
        return replace(o, color=c), f"recolor the {o.shape} in {ref} to {c}"
    if op == "translate":
        d = g.pick(tuple(_DIRS))
        n = g.step()
        dy, dx = _DIRS[d]
        o2 = g.clamp(replace(o, cy=o.cy + dy * n, cx=o.cx + dx * n))
        return o2, f"move the {o.shape} in {ref} {d} by {n}"
    if op == "rotate":
        a = int(g.rng.integers(1, 4)) * 15
        return replace(o, angle=o.angle + a), f"rotate the {o.shape} in {ref} by {a} degrees"
    if op == "scale":
        bigger = bool(g.rng.integers(2))
        f = 1.25 if bigger else 0.8
        o2 = g.clamp(replace(o, radius=o.radius * f))
        return o2, f"make the {o.shape} in {ref} {'larger' if bigger else 'smaller'}"
    raise ValueError(op)


def _followup(fragment: str, o: Obj) -> str:
    # "recolor the circle in <image_1> to red" -> "recolor it to red"
    return fragment.replace(f"the {o.shape} in <image_1>", "it")


@dataclass
class Rendered:
    sample: Sample
    ref_masks: list[np.ndarray]
    target_masks: list[np.ndarray]
    meta: dict = field(default_factory=dict)


def make_record(task: str, spec: SceneSpec, rng: np.random.Generator, n_out: int | None = None) -> Rendered:
    """Render one sample of the given task family."""
    g = _Gen(spec, rng)
    h, w = spec.size
    n_out = n_out or int(rng.integers(2, spec.max_out + 1))
    meta: dict = {}

    if task == "edit":
        o, bg = g.obj(), g.bg()
        o2, text = _apply_op(g, o, g.pick(spec.edit_ops), "<image_1>")
        (ri, rm), (ti, tm) = render(bg, [o], h, w), render(bg, [o2], h, w)
        meta["op"] = text.split()[0]
        return Rendered(Sample([ri], [ti], text, task), [rm], [tm], meta)

    if task == "multi_turn":
        o, bg = g.obj(), g.bg()
        ri, rm = render(bg, [o], h, w)
        targets, masks, parts = [], [], []
        cur = o
        for k in range(n_out):
            nxt, text = _apply_op(g, cur, g.pick(spec.edit_ops), "<image_1>")
            parts.append(text if k == 0 else "then " + _followup(text, cur))
            cur = nxt
            ti, tm = render(bg, [cur], h, w)
            targets.append(ti)
            masks.append(tm)
        return Rendered(Sample([ri], targets, ", ".join(parts), task), [rm], masks, meta)

    if task == "multi_view":
        o = g.obj()
        o = replace(o, shape=g.pick(("square", "triangle")))
        bg = g.bg(exclude_colors=(o.color,))
        ri, rm = render(bg, [o], h, w)
        a = int(rng.integers(1, 3)) * 15
        targets, masks = [], []
        for k in range(1, n_out + 1):
            ti, tm = render(bg, [replace(o, angle=o.angle + a * k)], h, w)
            targets.append(ti)
            masks.append(tm)
        text = f"show {n_out} views of the {o.shape} in <image_1>, turn {a} degrees each"
        return Rendered(Sample([ri], targets, text, task), [rm], masks, meta)

    if task == "storyboard":
        o = g.obj()
        ref_bg = g.plain_bg(exclude_colors=(o.color,))
        ri, rm = render(ref_bg, [o], h, w)
        targets, masks, programs = [], [], []
        prev = None
        for _ in range(n_out):
            prog = g.pick(spec.backgrounds, (prev,) if prev else ())
            bg = g.bg(program=prog, exclude_colors=(o.color,))
            moved = g.clamp(replace(o, cy=float(rng.uniform(0, h)), cx=float(rng.uniform(0, w))))
            ti, tm = render(bg, [moved], h, w)
            targets.append(ti)
            masks.append(tm)
            programs.append(prog)
            prev = prog
        meta["subject"] = [o.shape, o.color, o.radius]
        meta["backgrounds"] = programs
        text = f"a story of the {o.color} {o.shape} in <image_1> over {n_out} scenes, new background each panel"
        return Rendered(Sample([ri], targets, text, task), [rm], masks, meta)

    if task == "multi_cref":
        a = g.obj(scale=0.8)
        b = g.obj(exclude_colors=(a.color,), scale=0.8)
        r1, m1 = render(g.plain_bg((a.color,)), [a], h, w)
        r2, m2 = render(g.plain_bg((b.color,)), [b], h, w)
        bg = g.bg(exclude_colors=(a.color, b.color))
        a2 = replace(a, cy=h * 0.5, cx=w * 0.28, radius=min(a.radius, w * 0.2))
        b2 = replace(b, cy=h * 0.5, cx=w * 0.72, radius=min(b.radius, w * 0.2))
        ti, tm = render(bg, [a2, b2], h, w)
        text = (
            f"combine the {a.shape} in <image_1> and the {b.shape} in <image_2> "
            f"on a {bg.program} background"
        )
        return Rendered(Sample([r1, r2], [ti], text, task), [m1, m2], [tm], meta)

    if task == "cond_cref":
        o = g.obj()
        r1, m1 = render(g.plain_bg((o.color,)), [o], h, w)
        posed = g.clamp(replace(o, cy=float(rng.uniform(0, h)), cx=float(rng.uniform(0, w)),
                                angle=float(rng.integers(0, 12) * 15)))
        pm = shape_mask(posed, h, w)
        cond = np.where(pm[..., None], 1.0, 0.0) * np.ones(3)
        bg = g.bg(exclude_colors=(o.color,))
        ti, tm = render(bg, [posed], h, w)
        text = f"place the {o.shape} in <image_1> at the pose of the mask in <image_2>"
        return Rendered(Sample([r1, cond], [ti], text, task), [m1, pm], [tm], meta)

    if task == "sref":
        o = g.obj()
        r1, m1 = render(g.plain_bg((o.color,)), [o], h, w)
        style = g.bg(exclude_colors=(o.color,))
        r2, _ = render(style, [], h, w)
        restyled = replace(o, color=style.c2 if style.c2 != style.c1 else o.color)
        ti, tm = render(style, [restyled], h, w)
        m2 = np.ones((h, w), dtype=bool)
        text = f"put the {o.shape} in <image_1> in the style of <image_2>"
        return Rendered(Sample([r1, r2], [ti], text, task), [m1, m2], [tm], meta)

    if task == "video":
        o, bg = g.obj(), g.bg()
        d = g.pick(tuple(_DIRS))
        n = int(rng.integers(0, 4))
        dy, dx = _DIRS[d]
        o2 = g.clamp(replace(o, cy=o.cy + dy * n, cx=o.cx + dx * n))
        (ri, rm), (ti, tm) = render(bg, [o], h, w), render(bg, [o2], h, w)
        text = f"the {o.color} {o.shape} move {d}"
        return Rendered(Sample([ri], [ti], text, task), [rm], [tm], meta)

    if task == "paired_edit":
        return paired_edit(spec, rng, n_out)

    raise ValueError(f"unknown task {task!r}")


def paired_edit(spec: SceneSpec, rng: np.random.Generator, n: int) -> Rendered:
    """``n`` refs and ``n`` targets; target k is ref k with its shape recolored.

    All shapes get the same new color, so solving the task needs the
    pairing between each reference and its own output frame.
    """
    g = _Gen(spec, rng)
    h, w = spec.size
    new = g.pick(spec.colors)
    refs, tgts, rms, tms = [], [], [], []
    for _ in range(n):
        o = g.obj(exclude_colors=(new,))
        bg = g.bg(exclude_colors=(new, o.color))
        ri, rm = render(bg, [o], h, w)
        ti, tm = render(bg, [replace(o, color=new)], h, w)
        refs.append(ri)
        tgts.append(ti)
        rms.append(rm)
        tms.append(tm)
    text = f"recolor each shape to {new}"
    return Rendered(Sample(refs, tgts, text, "paired_edit"), rms, tms, {"color": new})


def _record_rng(seed: int, idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, idx])


def gen_corpus(
    spec: SceneSpec,
    n: int,
    seed: int,
    out_dir,
    buckets=None,
    workers: int = 1,
    manifest_name: str = "manifest.jsonl",
) -> list[ManifestRecord]:
    """Render ``n`` records to ``out_dir`` and write the manifest.

    Task families cycle through ``spec.tasks``. Each record draws from its own
    generator seeded by ``(seed, index)``, so output does not depend on
    ``workers``. Video records carry a block-matching motion score.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    h, w = spec.size
    bucket = assign_bucket_index(h, w, buckets) if buckets else 0

    def build(idx: int) -> ManifestRecord:
        task = spec.tasks[idx % len(spec.tasks)]
        rec = make_record(task, spec, _record_rng(seed, idx))
        s = rec.sample
        rid = f"{idx:06d}"
        refs, tgts, masks = [], [], []
        for k, (img, m) in enumerate(zip(s.refs, rec.ref_masks)):
            p = f"images/{rid}_r{k}.png"
            save_image(out / p, img)
            save_mask(out / f"images/{rid}_r{k}_mask.png", m)
            refs.append(p)
            masks.append(f"images/{rid}_r{k}_mask.png")
        for k, (img, m) in enumerate(zip(s.targets, rec.target_masks)):
            p = f"images/{rid}_t{k}.png"
            save_image(out / p, img)
            save_mask(out / f"images/{rid}_t{k}_mask.png", m)
            tgts.append(p)
            masks.append(f"images/{rid}_t{k}_mask.png")
        score = motion_score(s.refs[0], s.targets[0]) if task == "video" else None
        return ManifestRecord(
            task=task, instruction=s.instruction, ref_paths=refs, target_paths=tgts,
            bucket=bucket, motion_score=score, fg_mask_paths=masks, id=rid, extra=rec.meta,
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            records = list(ex.map(build, range(n)))
    else:
        records = [build(i) for i in range(n)]
    write_manifest(out / manifest_name, records)
    return records


def moving_clip(spec: SceneSpec, rng: np.random.Generator, length: int, speed: int = 2):
    """Frames of one object drifting across a fixed background."""
    g = _Gen(spec, rng)
    o, bg = g.obj(scale=0.8), g.bg()
    d = g.pick(tuple(_DIRS))
    dy, dx = _DIRS[d]
    frames = []
    for k in range(length):
        cur = g.clamp(replace(o, cy=o.cy + dy * speed * k, cx=o.cx + dx * speed * k))
        frames.append(render(bg, [cur], *spec.size)[0])
    return frames
