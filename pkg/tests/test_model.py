import numpy as np
import pytest

from montage import tensor as tc
from montage.errors import ConfigError, ConfigMismatch
from montage.flow import fm_loss
from montage.model import ModelConfig, count_params, forward, init_params, param_shapes, predict_velocity
from montage.packing import PackConfig, Sample, collate, draw_noise, pack
from montage.tensor.gradcheck import check_gradients
from montage.text import VOCAB_SIZE

TINY = ModelConfig(dim=16, heads=2, depth_dual=1, depth_single=1, mlp_ratio=2, patch=2, text_len=6, time_freq_dim=8)


def hand_count(D, H, P, V, L, F, n_dual, n_single, modulate_text=True):
    """Parameter count written out from the block formulas."""
    linear = lambda i, o: i * o + o
    block = linear(D, 3 * D) + linear(D, D) + linear(D, H) + linear(H, D)
    mod = linear(D, 6 * D)
    embed = V * D + L * D + linear(P, D) + linear(F, D) + linear(D, D)
    dual = 2 * block + mod + (mod if modulate_text else 0)
    single = block + mod
    final = linear(D, 2 * D) + linear(D, P)
    return embed + n_dual * dual + n_single * single + final


def sample_seq(cfg, rng, n_in=1, n_out=1, size=(4, 4), t=0.5, text="recolor the circle in <image_1>"):
    s = Sample([rng.random(size + (3,)) for _ in range(n_in)], [rng.random(size + (3,)) for _ in range(n_out)], text)
    return pack(s, t, draw_noise(s, cfg.patch, rng, np.float64), cfg=cfg.pack_config, dtype=np.float64)


def perturbed(cfg, seed=0):
    with tc.default_dtype(np.float64):
        params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in params.items():
        p.data[...] = p.data + rng.normal(0, 0.3 if name.startswith("final") else 0.05, p.shape)
    return params


def test_default_config():
    cfg = ModelConfig()
    assert (cfg.dim, cfg.heads, cfg.head_dim, cfg.depth_dual, cfg.depth_single, cfg.mlp_ratio) == (128, 4, 32, 2, 2, 4)
    assert cfg.rope.split == (8, 12, 12)


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(dim=130, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(depth_dual=0, depth_single=0)


@pytest.mark.parametrize("cfg", [ModelConfig(), TINY, ModelConfig(patch=8, modulate_text=False)])
def test_param_count_closed_form(cfg):
    params = init_params(cfg, 0)
    expected = hand_count(cfg.dim, cfg.dim * cfg.mlp_ratio, 3 * cfg.patch**2, VOCAB_SIZE, cfg.text_len,
                          cfg.time_freq_dim, cfg.depth_dual, cfg.depth_single, cfg.modulate_text)
    assert count_params(params) == expected
    assert set(params) == set(param_shapes(cfg))


def test_init_deterministic_and_zero_final():
    a, b = init_params(TINY, 7), init_params(TINY, 7)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    assert not np.any(a["final.w"].data) and not np.any(a["final.b"].data)
    w = a["dual0.img.qkv.w"].data
    assert np.abs(w).max() <= 0.04 and 0.01 < w.std() < 0.03
    assert not np.array_equal(init_params(TINY, 8)["dual0.img.qkv.w"].data, w)


def test_zero_init_outputs_zero():
    rng = np.random.default_rng(0)
    params = init_params(TINY, 0)
    out = predict_velocity(params, TINY, sample_seq(TINY, rng, 2, 2))
    assert out.shape == (8, 12)
    assert not np.any(out.data)


@pytest.mark.parametrize("n_in,n_out", [(0, 1), (1, 1), (2, 3), (3, 2)])
def test_output_shape(n_in, n_out):
    rng = np.random.default_rng(n_in * 10 + n_out)
    out = predict_velocity(perturbed(TINY), TINY, sample_seq(TINY, rng, n_in, n_out))
    assert out.shape == (4 * n_out, 12)


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    params, seq = perturbed(TINY), sample_seq(TINY, rng, 2, 1)
    a = predict_velocity(params, TINY, seq).data
    b = predict_velocity(params, TINY, seq).data
    assert a.tobytes() == b.tobytes()


def test_padding_is_masked():
    rng = np.random.default_rng(2)
    params, seq = perturbed(TINY), sample_seq(TINY, rng, 1, 1)
    n = seq.image_tokens.shape[0]
    with tc.no_grad():
        a = forward(params, TINY, collate([seq])).data[0, :n]
        b = forward(params, TINY, collate([seq], pad_to=2 * n)).data[0, :n]
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_batching_matches_single():
    rng = np.random.default_rng(3)
    params = perturbed(TINY)
    s1, s2 = sample_seq(TINY, rng, 1, 1), sample_seq(TINY, rng, 2, 2, text="move it")
    with tc.no_grad():
        joint = forward(params, TINY, collate([s1, s2])).data
        one = forward(params, TINY, collate([s1])).data
    np.testing.assert_allclose(joint[0, : one.shape[1]], one[0], atol=1e-10)


def test_swap_refs_only_acts_through_temporal_index():
    rng = np.random.default_rng(4)
    params = perturbed(TINY)
    r1, r2, tgt = rng.random((4, 4, 3)), rng.random((4, 4, 3)), rng.random((4, 4, 3))
    noise = [rng.standard_normal((4, 12))]
    pc = TINY.pack_config
    a = pack(Sample([r1, r2], [tgt], "x"), 0.5, noise, cfg=pc, dtype=np.float64)
    b = pack(Sample([r2, r1], [tgt], "x"), 0.5, noise, cfg=pc, dtype=np.float64)
    with tc.no_grad():
        out_a = forward(params, TINY, collate([a])).data[0, a.target_slice]
        out_b = forward(params, TINY, collate([b])).data[0, b.target_slice]
        assert np.abs(out_a - out_b).max() > 1e-6  # the temporal index matters
        bb = collate([b])
        bb.positions[0, :4, 0], bb.positions[0, 4:8, 0] = 1, 0  # give each image its old index back
        out_fixed = forward(params, TINY, bb).data[0, b.target_slice]
    np.testing.assert_allclose(out_fixed, out_a, atol=1e-10)
    same = pack(Sample([r1, r1], [tgt], "x"), 0.5, noise, cfg=pc, dtype=np.float64)
    with tc.no_grad():
        o1 = forward(params, TINY, collate([same])).data
        o2 = forward(params, TINY, collate([same])).data
    assert o1.tobytes() == o2.tobytes()


def test_config_mismatch():
    rng = np.random.default_rng(5)
    seq = sample_seq(TINY, rng)
    other = ModelConfig(dim=16, heads=2, depth_dual=1, depth_single=1, patch=2, text_len=8, time_freq_dim=8)
    with pytest.raises(ConfigMismatch):
        forward(init_params(other), other, collate([seq]))
    wide = ModelConfig(dim=16, heads=2, depth_dual=1, depth_single=1, patch=4, text_len=6, time_freq_dim=8)
    with pytest.raises(ConfigMismatch):
        forward(init_params(wide), wide, collate([seq]))


def test_end_to_end_gradients():
    rng = np.random.default_rng(6)
    params = perturbed(TINY, 3)
    batch = collate([sample_seq(TINY, rng, 1, 1, t=0.3), sample_seq(TINY, rng, 0, 2, t=0.8, text="move it")])
    names = sorted(params)

    def loss():
        return fm_loss(forward(params, TINY, batch), batch.velocity_target, batch.target_mask)

    with tc.default_dtype(np.float64):
        errs = check_gradients(loss, [params[n] for n in names], max_entries=6, rng=np.random.default_rng(0))
    bad = {n: e for n, e in zip(names, errs) if e > 1e-3}
    assert not bad, bad


def test_no_text_modulation_variant_runs():
    cfg = ModelConfig(dim=16, heads=2, depth_dual=1, depth_single=0, patch=2, text_len=6, time_freq_dim=8, modulate_text=False)
    rng = np.random.default_rng(7)
    out = predict_velocity(perturbed(cfg), cfg, sample_seq(cfg, rng))
    assert out.shape == (4, 12) and np.all(np.isfinite(out.data))
