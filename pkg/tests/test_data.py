import hashlib
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from montage.data import (
    DEFAULT_BUCKETS,
    DESK_BUCKETS,
    Bucket,
    ManifestRecord,
    SceneSpec,
    assign_bucket,
    assign_bucket_index,
    batch_plan,
    batch_size_for,
    block_motion,
    cross_transition_pairs,
    filter_pairs,
    gen_corpus,
    load_image,
    make_buckets,
    make_record,
    motion_score,
    moving_clip,
    read_manifest,
    resize_to_bucket,
    write_manifest,
)
from montage.errors import BudgetTooSmall, IndivisibleShape, ShapeMismatch, UnknownToken
from montage.packing import Sample
from montage.text import render_prompt, tokenize_text

# buckets


def brute_bucket(h, w, dims):
    """Straight evaluation of the rule: aspect distance, then area distance, then list order."""
    scored = [(abs(math.log(h / w) - math.log(bh / bw)), abs(h * w - bh * bw), i) for i, (bh, bw) in enumerate(dims)]
    return dims[min(scored)[2]]


def test_default_bucket_list():
    assert len(DEFAULT_BUCKETS) == 37
    assert len(set(DEFAULT_BUCKETS)) == 37
    assert all(h % 32 == 0 and w % 32 == 0 for h, w in DEFAULT_BUCKETS)


def test_bucket_examples():
    buckets = make_buckets()
    b = assign_bucket(500, 500, buckets)
    assert (b.height, b.width) == (512, 512)
    wide = assign_bucket(1080, 1920, buckets)  # (height, width)
    assert (wide.height, wide.width) == brute_bucket(1080, 1920, DEFAULT_BUCKETS) == (576, 1024)
    for dims in DEFAULT_BUCKETS:
        assert DEFAULT_BUCKETS[assign_bucket_index(*dims, buckets)] == dims


@given(st.integers(1, 5000), st.integers(1, 5000))
def test_bucketing_total_and_matches_rule(h, w):
    assert DEFAULT_BUCKETS[assign_bucket_index(h, w, DEFAULT_BUCKETS)] == brute_bucket(h, w, DEFAULT_BUCKETS)


def test_bucket_token_count():
    b = Bucket(512, 768, 16)
    assert b.token_count == 32 * 48
    with pytest.raises(ValueError):
        Bucket(500, 512, 16)


def test_resize_to_bucket():
    img = np.random.default_rng(0).random((20, 40, 3))
    out = resize_to_bucket(img, 16, 16)
    assert out.shape == (16, 16, 3)
    assert resize_to_bucket(img, 20, 40) is img
    const = resize_to_bucket(np.full((30, 50, 3), 0.4), 16, 32)
    np.testing.assert_allclose(const, 0.4, atol=1 / 255)


def test_batch_sizes_patch16():
    sizes = [batch_size_for(Bucket(s, s, 16).token_count, 8192, cap=8) for s in (512, 768, 1024)]
    assert sizes == [8, 4, 2]
    totals = [bs * Bucket(s, s, 16).token_count for bs, s in zip(sizes, (512, 768, 1024))]
    assert totals == [8192, 9216, 8192]
    assert max(totals) / min(totals) <= 1.15


def test_budget_too_small():
    with pytest.raises(BudgetTooSmall):
        batch_size_for(1024, 1000)


class R:
    def __init__(self, bucket, frames=1):
        self.bucket, self.frames = bucket, frames


@settings(max_examples=50)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=40), st.integers(64, 400))
def test_batch_plan_never_mixes(buckets_of, budget):
    dims = [(16, 16), (32, 32), (16, 32)]
    bl = make_buckets(dims, patch=4)
    recs = [R(b) for b in buckets_of]
    if budget < max(bl[b].token_count for b in buckets_of):
        with pytest.raises(BudgetTooSmall):
            batch_plan(recs, bl, budget)
        return
    plan = batch_plan(recs, bl, budget)
    seen = sorted(i for pb in plan for i in pb.indices)
    assert seen == list(range(len(recs)))
    for pb in plan:
        assert {recs[i].bucket for i in pb.indices} == {pb.bucket}
        assert len(pb.indices) <= pb.batch_size
        tok = bl[pb.bucket].token_count
        assert (pb.batch_size - 1) * tok <= budget  # over budget by at most one sample
        assert pb.batch_size == max(1, math.floor(budget / tok + 0.5))


def test_batch_plan_counts_frames():
    bl = make_buckets([(16, 16)], patch=4)
    plan = batch_plan([R(0, 3)] * 5, bl, 192, frames_per_sample=lambda r: r.frames)
    assert [pb.batch_size for pb in plan] == [4, 4]
    assert DESK_BUCKETS[assign_bucket_index(32, 32, DESK_BUCKETS)] == (32, 32)


# motion


def texture(rng, h, w):
    x = rng.random((h, w))
    k = np.ones(3) / 3
    x = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 0, x)
    x = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, x)
    return np.repeat(x[..., None], 3, axis=2)


def shifted_pair(rng, dy, dx, size=48, margin=10):
    big = texture(rng, size + 2 * margin, size + 2 * margin)
    a = big[margin : margin + size, margin : margin + size]
    b = big[margin - dy : margin - dy + size, margin - dx : margin - dx + size]
    return a, b


def test_motion_identical_is_zero():
    a = texture(np.random.default_rng(0), 32, 32)
    assert motion_score(a, a) == 0.0


@pytest.mark.parametrize("dy,dx", [(0, 2), (0, -3), (1, 0), (2, 2), (-4, 1)])
def test_motion_recovers_translation(dy, dx):
    a, b = shifted_pair(np.random.default_rng(dy * 10 + dx + 50), dy, dx)
    assert abs(motion_score(a, b) - math.hypot(dy, dx)) <= 0.25
    v = block_motion(a, b)
    assert np.all(v[1:-1, 1:-1] == (dy, dx))


@settings(max_examples=40)
@given(st.integers(-7, 7), st.integers(-7, 7), st.integers(0, 1000))
def test_motion_symmetric_for_translations(dy, dx, seed):
    a, b = shifted_pair(np.random.default_rng(seed), dy, dx, size=32)
    assert motion_score(a, b) == pytest.approx(motion_score(b, a), abs=0.25)
    assert motion_score(a, b) == pytest.approx(math.hypot(dy, dx), abs=0.25)


def test_motion_noise_and_errors():
    rng = np.random.default_rng(1)
    s = motion_score(rng.random((16, 16, 3)), rng.random((16, 16, 3)))
    assert s >= 0.0
    with pytest.raises(ShapeMismatch):
        motion_score(np.zeros((16, 16)), np.zeros((16, 8)))
    with pytest.raises(IndivisibleShape):
        motion_score(np.zeros((12, 16)), np.zeros((12, 16)))


def recs(scores):
    return [ManifestRecord("video", "x", [], [], 0, motion_score=s, id=str(i)) for i, s in enumerate(scores)]


def test_filter_identity_at_zero():
    rs = recs([0.0, 1.5, 3.0])
    out = filter_pairs(rs, 0.0)
    assert [r.id for r in out] == ["0", "1", "2"] and all(r.weight == 1.0 for r in out)


def test_filter_all_below_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert filter_pairs(recs([0.1, 0.2]), 1.0) == []
    assert "removed all" in caplog.text


@given(st.lists(st.floats(0, 8, allow_nan=False), max_size=30), st.floats(0, 8, allow_nan=False), st.floats(0.5, 4))
def test_filter_counts_and_weights(scores, thr, up):
    rs = recs(scores)
    out = filter_pairs(rs, thr, up)
    assert len(out) == sum(1 for s in scores if s >= thr)
    assert all(r.weight == up for r in out)
    assert all(r.weight == 1.0 for r in rs)


def test_filter_requires_score():
    with pytest.raises(ValueError):
        filter_pairs(recs([None]), 0.0)


# cross transitions


def const_clip(value, n):
    return [np.full((4, 4, 3), value) for _ in range(n)]


def test_single_clip_has_no_transitions():
    pairs = cross_transition_pairs([const_clip(0.1, 6)], seed=0)
    assert len(pairs) == 5 and not any(p.transition for p in pairs)


def test_straddling_pair_has_max_difference():
    pairs = cross_transition_pairs([const_clip(0.0, 4), const_clip(1.0, 4)], seed=3)
    cross = [p for p in pairs if p.transition]
    assert len(cross) == 1
    assert np.abs(cross[0].frame_a - cross[0].frame_b).max() == 1.0
    assert all(np.abs(p.frame_a - p.frame_b).max() == 0.0 for p in pairs if not p.transition)


@settings(max_examples=60)
@given(st.lists(st.integers(1, 7), min_size=1, max_size=6), st.integers(1, 4), st.integers(1, 3), st.integers(0, 99))
def test_transition_count_matches_combinatorics(lengths, gap, stride, seed):
    clips = [const_clip(i / 10, n) for i, n in enumerate(lengths)]
    pairs = cross_transition_pairs(clips, seed=seed, gap=gap, stride=stride)
    # rebuild splice points from the same shuffled order, then count windows by brute force
    order = np.random.default_rng(seed).permutation(len(clips))
    cuts = np.cumsum([lengths[i] for i in order])[:-1]
    total = sum(lengths)
    starts = range(0, total - gap, stride)
    expected = sum(1 for o in starts if any(o < c <= o + gap for c in cuts))
    assert len(pairs) == len(starts)
    assert sum(p.transition for p in pairs) == expected
    if stride == 1 and min(lengths) >= gap:
        assert expected == (len(lengths) - 1) * gap
    for p in pairs:
        assert p.transition == (p.clip_a != p.clip_b) or gap > min(lengths)


def test_transitions_deterministic():
    clips = [const_clip(0.1, 5), const_clip(0.5, 3), const_clip(0.9, 4)]
    a = cross_transition_pairs(clips, seed=7)
    b = cross_transition_pairs(clips, seed=7)
    assert [(p.index_a, p.clip_a, p.transition) for p in a] == [(p.index_a, p.clip_a, p.transition) for p in b]


def test_moving_clip_feeds_motion():
    frames = moving_clip(SceneSpec(size=(32, 32)), np.random.default_rng(0), 3, speed=2)
    assert len(frames) == 3
    assert motion_score(frames[0], frames[0]) == 0.0


# scenes and corpus

SPEC = SceneSpec(size=(32, 32))


@pytest.mark.parametrize("task", SPEC.tasks + ("paired_edit",))
def test_every_task_renders(task):
    rec = make_record(task, SPEC, np.random.default_rng(1))
    s = rec.sample
    assert isinstance(s, Sample)
    for img in s.refs + s.targets:
        assert img.shape == (32, 32, 3) and img.min() >= 0 and img.max() <= 1
    assert len(rec.ref_masks) == len(s.refs) and len(rec.target_masks) == len(s.targets)
    tokenize_text(render_prompt(s.instruction, len(s.refs), len(s.targets)), 64, strict=True)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_recolor_changes_only_inside_mask(seed):
    spec = replace(SPEC, edit_ops=("recolor",))
    rec = make_record("edit", spec, np.random.default_rng(seed))
    diff = np.abs(rec.sample.refs[0] - rec.sample.targets[0]).max(axis=2) > 0
    assert not np.any(diff & ~rec.ref_masks[0])
    assert rec.sample.instruction.startswith("recolor")


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_storyboard_keeps_subject_changes_background(seed):
    rec = make_record("storyboard", SPEC, np.random.default_rng(seed))
    bgs = rec.meta["backgrounds"]
    assert all(a != b for a, b in zip(bgs, bgs[1:]))
    assert rec.meta["subject"][1] in rec.sample.instruction


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_instructions_in_vocabulary(seed):
    rng = np.random.default_rng(seed)
    for task in SPEC.tasks:
        s = make_record(task, SPEC, rng).sample
        try:
            tokenize_text(s.instruction, 64, strict=True)
        except UnknownToken as e:  # pragma: no cover - reported with context
            raise AssertionError(f"{task}: {s.instruction!r}") from e


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_corpus_seed_deterministic(tmp_path):
    gen_corpus(SPEC, 16, 42, tmp_path / "a")
    gen_corpus(SPEC, 16, 42, tmp_path / "b", workers=3)
    gen_corpus(SPEC, 16, 43, tmp_path / "c")
    da, db, dc = (tree_digest(tmp_path / k) for k in "abc")
    assert da == db
    assert da != dc


def test_corpus_manifest_contents(tmp_path):
    records = gen_corpus(SPEC, 8, 0, tmp_path, buckets=DESK_BUCKETS)
    lines = (tmp_path / "manifest.jsonl").read_bytes().split(b"\n")
    assert lines[-1] == b"" and len(lines) == 9
    back = read_manifest(tmp_path / "manifest.jsonl")
    assert back == records
    for r in back:
        assert DESK_BUCKETS[r.bucket] == (32, 32)
        for p in r.ref_paths + r.target_paths + r.fg_mask_paths:
            assert (tmp_path / p).exists()
        assert (r.motion_score is not None) == (r.task == "video")
    assert {r.task for r in back} == set(SPEC.tasks)
    img = load_image(tmp_path / back[0].ref_paths[0])
    assert img.shape == (32, 32, 3)


def test_manifest_roundtrip(tmp_path):
    rs = recs([1.0, None])
    write_manifest(tmp_path / "m.jsonl", rs)
    assert read_manifest(tmp_path / "m.jsonl") == rs


def test_corpus_needs_records(tmp_path):
    with pytest.raises(ValueError):
        gen_corpus(SPEC, 0, 0, tmp_path)
