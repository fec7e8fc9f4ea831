import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from montage import tensor as tc
from montage.errors import ConfigError, EmptyMask, ShapeMismatch
from montage.flow import (
    SamplerConfig,
    euler_sample,
    fm_loss,
    make_training_pair,
    sample,
    sample_train_times,
    shift_time,
    shifted_density,
    time_grid,
)
from montage.model import ModelConfig, init_params
from montage.tensor import Tensor

unit = st.floats(0, 1, allow_nan=False)
shifts = st.floats(0.05, 20, allow_nan=False)


def test_sampler_defaults():
    c = SamplerConfig()
    assert (c.steps, c.cfg_scale, c.shift) == (50, 6.0, 5.0)
    for bad in (dict(steps=0), dict(shift=0.0), dict(cfg_scale=-1.0)):
        with pytest.raises(ConfigError):
            SamplerConfig(**bad)


def test_shift_examples():
    assert shift_time(0.0) == 0.0 and shift_time(1.0) == 1.0
    assert shift_time(0.5, 5.0) == pytest.approx(2.5 / 3, abs=1e-15)


@given(unit)
def test_shift_one_is_identity(u):
    assert shift_time(u, 1.0) == pytest.approx(u, abs=1e-15)


@given(unit, unit, shifts)
def test_shift_monotone(a, b, s):
    if a < b:
        assert shift_time(a, s) < shift_time(b, s)
    assert 0.0 <= shift_time(a, s) <= 1.0


@given(unit, shifts)
def test_shift_bijective(u, s):
    t = shift_time(u, s)
    assert shift_time(t, 1.0 / s) == pytest.approx(u, abs=1e-9)  # the inverse map is shift 1/s


def test_shifted_density_integrates_to_one():
    grid = np.linspace(0, 1, 200001)
    assert np.trapezoid(shifted_density(grid), grid) == pytest.approx(1.0, abs=1e-6)


def test_train_time_chi_square():
    t = sample_train_times(np.random.default_rng(0), 100_000, 5.0)
    edges = np.linspace(0, 1, 21)
    observed, _ = np.histogram(t, edges)
    # bin probabilities via the inverse map u = t / (s - (s - 1) t)
    cdf = edges / (5.0 - 4.0 * edges)
    expected = np.diff(cdf) * t.size
    _, p = stats.chisquare(observed, expected)
    assert p > 0.01


def test_training_pair_endpoints():
    rng = np.random.default_rng(1)
    x, eps = rng.standard_normal((2, 5, 3))
    np.testing.assert_array_equal(make_training_pair(x, eps, 0.0)[0], x)
    np.testing.assert_array_equal(make_training_pair(x, eps, 1.0)[0], eps)
    xt, v = make_training_pair(np.zeros_like(x), eps, 0.3)
    np.testing.assert_array_equal(v, eps)
    np.testing.assert_allclose(xt, 0.3 * eps)
    with pytest.raises(ShapeMismatch):
        make_training_pair(x, eps[:2], 0.5)


def test_fm_loss_examples():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((2, 4, 3))
    mask = np.array([[True, True, False, False], [False, True, True, True]])
    assert float(fm_loss(Tensor(v), v, mask).data) == 0.0
    assert float(fm_loss(Tensor(v + 1.0, dtype=np.float64), v, mask).data) == pytest.approx(1.0)
    pert = v.copy()
    pert[~mask] += 100.0
    assert float(fm_loss(Tensor(pert), v, mask).data) == 0.0
    with pytest.raises(EmptyMask):
        fm_loss(Tensor(v), v, np.zeros((2, 4), bool))


def test_time_grid():
    g = time_grid(4, 1.0)
    np.testing.assert_allclose(g, [1, 0.75, 0.5, 0.25, 0])
    g5 = time_grid(50, 5.0)
    assert g5[0] == 1.0 and g5[-1] == 0.0 and np.all(np.diff(g5) < 0)


def test_one_step_linear_flow_is_exact():
    rng = np.random.default_rng(3)
    m = np.array([2.0, -1.0, 0.5])
    x1 = rng.standard_normal((1000, 3))
    # data = noise + m, so the velocity eps - x = -m is constant in t
    out = euler_sample(lambda x, t: np.broadcast_to(-m, x.shape), x1, steps=1)
    np.testing.assert_array_equal(out, x1 + m)
    np.testing.assert_allclose(out.mean(0) - x1.mean(0), m, atol=1e-12)


def test_cfg_one_skips_uncond():
    calls = []

    def vu(x, t):
        calls.append(t)
        return x

    euler_sample(lambda x, t: -x, np.ones(3), steps=5, cfg_scale=1.0, velocity_uncond=vu)
    assert calls == []
    euler_sample(lambda x, t: -x, np.ones(3), steps=5, cfg_scale=3.0, velocity_uncond=vu)
    assert len(calls) == 5


def test_guidance_formula():
    out = euler_sample(lambda x, t: np.full_like(x, 2.0), np.zeros(2), steps=1, shift=1.0,
                       cfg_scale=3.0, velocity_uncond=lambda x, t: np.full_like(x, 1.0))
    # v = 1 + 3 (2 - 1) = 4, dt = -1
    np.testing.assert_array_equal(out, [-4.0, -4.0])


def _tiny():
    cfg = ModelConfig(dim=16, heads=2, depth_dual=1, depth_single=1, mlp_ratio=2, patch=2, text_len=6, time_freq_dim=8)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(9)
    for p in params.values():
        p.data[...] += rng.normal(0, 0.05, p.shape).astype(p.dtype)
    return cfg, params


def test_sample_deterministic_and_shapes():
    cfg, params = _tiny()
    refs = [np.random.default_rng(0).random((4, 6, 3))]
    sc = SamplerConfig(steps=4, cfg_scale=2.0, seed=5)
    a = sample(params, cfg, refs, "move it", 3, sc)
    b = sample(params, cfg, refs, "move it", 3, sc)
    assert len(a) == 3 and a[0].shape == (4, 6, 3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert all(x.min() >= 0 and x.max() <= 1 for x in a)
    c = sample(params, cfg, refs, "move it", 3, SamplerConfig(steps=4, cfg_scale=2.0, seed=6))
    assert not np.array_equal(a[0], c[0])


def test_sample_zero_model_returns_noise():
    cfg = ModelConfig(dim=16, heads=2, depth_dual=1, depth_single=1, patch=2, text_len=6, time_freq_dim=8)
    params = init_params(cfg, 0)
    out = sample(params, cfg, [], "x", 1, SamplerConfig(steps=3, seed=1), size=(4, 4))
    noise = np.random.default_rng(1).standard_normal((4, 12)).astype(np.float32)
    from montage.packing import from_model_space, unpatchify

    np.testing.assert_allclose(out[0], from_model_space(unpatchify(noise.astype(np.float64), 4, 4, 2)), atol=1e-6)


def test_sample_needs_size_without_refs():
    cfg, params = _tiny()
    with pytest.raises(ValueError):
        sample(params, cfg, [], "x", 1, SamplerConfig(steps=1))
