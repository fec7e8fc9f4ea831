import json

import numpy as np
import pytest

from montage.cli import run
from montage.config import RunConfig, load_config, parse_config
from montage.data import load_image, save_image
from montage.errors import ConfigError
from montage.train import load_checkpoint

TINY_MODEL = {"dim": 16, "heads": 2, "depth_dual": 1, "depth_single": 1, "mlp_ratio": 2, "patch": 4,
              "text_len": 24, "time_freq_dim": 16}


def write_cfg(path, **extra):
    cfg = {
        "seed": 3,
        "model": TINY_MODEL,
        "sampler": {"steps": 3, "cfg_scale": 2.0},
        "buckets": [[16, 16]],
        "corpus": {"n": 10, "size": [16, 16], "tasks": ["edit", "video", "multi_cref", "multi_turn"], "max_out": 2},
        "train": {"stage_steps": [3, 3, 2], "multi_tasks": ["multi_cref", "multi_turn"], "token_budget": 48, "batch_cap": 2},
        "ablation": {"steps": 4, "n_train": 4, "n_val": 2, "size": 16, "batch": 2, "eval_every": 2},
    }
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return str(path)


def test_parse_defaults_and_unknown_keys():
    cfg = parse_config({})
    assert cfg == RunConfig()
    for bad in ({"bogus": 1}, {"train": {"lr_max": 1}}, {"model": {"width": 3}}, {"sampler": {"steps": 0}},
                {"buckets": "huge"}, {"model": {"dim": 30, "heads": 4}}):
        with pytest.raises(ConfigError):
            parse_config(bad)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_config_digest_stable(tmp_path):
    a = load_config(write_cfg(tmp_path / "c.json"))
    b = load_config(write_cfg(tmp_path / "d.json"))
    assert a.digest() == b.digest()
    b.seed = 4
    assert a.digest() != b.digest()


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert run(["sample", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--n-out", "--refs", "--prompt", "--steps", "--cfg-scale", "--strategy"):
        assert flag in out
    assert run(["eval", "--help"]) == 0
    assert "--vlm" in capsys.readouterr().out


def test_usage_and_config_exit_codes(tmp_path, capsys):
    assert run([]) == 2
    assert run(["curate"]) == 2  # --out missing
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": True}))
    assert run(["curate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert not (tmp_path / "o").exists()
    assert run(["train", "--out", str(tmp_path / "t")]) == 3  # no manifest
    assert run(["sample", "--out", str(tmp_path / "s"), "--prompt", "x", "--refs", str(tmp_path / "nope.png")]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "run.json")
    assert run(["curate", "--config", cfg, "--out", str(root / "data")]) == 0
    assert run(["train", "--config", cfg, "--out", str(root / "ck"), "--data", str(root / "data" / "manifest.jsonl")]) == 0
    return root, cfg


def test_curate_and_train_outputs(pipeline):
    root, cfg = pipeline
    assert (root / "data" / "manifest.jsonl").exists()
    ck = load_checkpoint(root / "ck" / "final.imtg")
    assert ck.step == 8
    assert ck.meta["run_config"] == load_config(cfg).digest()
    assert len((root / "ck" / "loss.csv").read_text().splitlines()) == 9


def test_train_deterministic_via_cli(pipeline):
    root, cfg = pipeline
    data = str(root / "data" / "manifest.jsonl")
    assert run(["train", "--config", cfg, "--out", str(root / "ck2"), "--data", data]) == 0
    for f in ("loss.csv", "final.imtg"):
        assert (root / "ck" / f).read_bytes() == (root / "ck2" / f).read_bytes()
    assert run(["train", "--config", cfg, "--out", str(root / "ck3"), "--data", data, "--seed", "9", "--steps", "2"]) == 0
    assert len((root / "ck3" / "loss.csv").read_text().splitlines()) == 3


def test_sample_is_deterministic(pipeline):
    root, cfg = pipeline
    ref = np.random.default_rng(0).random((16, 16, 3))
    save_image(root / "a.png", ref)
    save_image(root / "b.png", ref[::-1])
    args = ["sample", "--config", cfg, "--checkpoint", str(root / "ck" / "final.imtg"), "--refs",
            f"{root / 'a.png'},{root / 'b.png'}", "--prompt", "combine <image_1> and <image_2>", "--n-out", "3",
            "--seed", "7"]
    assert run(args + ["--out", str(root / "s1")]) == 0
    assert run(args + ["--out", str(root / "s2")]) == 0
    for name in ("out_1.png", "out_2.png", "out_3.png", "grid.png"):
        assert (root / "s1" / name).read_bytes() == (root / "s2" / name).read_bytes()
    assert load_image(root / "s1" / "out_1.png").shape == (16, 16, 3)
    assert run(args[:-1] + ["8", "--out", str(root / "s3")]) == 0
    assert (root / "s1" / "out_1.png").read_bytes() != (root / "s3" / "out_1.png").read_bytes()


def test_sample_without_refs(pipeline, tmp_path):
    root, cfg = pipeline
    assert run(["sample", "--config", cfg, "--prompt", "a red circle", "--size", "16", "16", "--steps", "2",
                "--cfg-scale", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "out_1.png").exists()


def test_eval_identical_sets(pipeline, tmp_path, capsys):
    root, _ = pipeline
    img = root / "a.png"
    assert run(["eval", "--gen", f"{img},{img}", "--refs", str(img), "--vlm", "stub:6", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["ip"] == pytest.approx(1.0, abs=1e-12)
    assert rep["tc"] == 1.0
    assert [v["score"] for v in rep["vlm"]] == [6, 6]
    assert run(["eval", "--gen", str(img), "--refs", str(img), "--gen-masks", "", "--out", str(tmp_path)]) == 3


def test_ablate_rope_outputs(pipeline, tmp_path):
    _, cfg = pipeline
    assert run(["ablate-rope", "--config", cfg, "--out", str(tmp_path), "--steps", "4"]) == 0
    lines = (tmp_path / "rope_ablation.csv").read_text().splitlines()
    assert lines[0] == "step,marginal_val_loss,even_val_loss"
    assert [int(l.split(",")[0]) for l in lines[1:]] == [2, 4]
    assert load_image(tmp_path / "rope_ablation.png").ndim == 3
