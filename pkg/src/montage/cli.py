"""Command-line entry point: curate, train, sample, eval, ablate-rope."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, MontageError

log = logging.getLogger("montage")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


def _csv(s: str) -> list[str]:
    return [p for p in s.split(",") if p]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", required=True, help="output directory")

    ap = argparse.ArgumentParser(prog="montage", description="Many-to-many image generation toolkit.")
    sub = ap.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    sub.add_parser("curate", parents=[common], help="render a synthetic corpus and write a manifest")

    p = sub.add_parser("train", parents=[common], help="run the staged training plan")
    p.add_argument("--data", metavar="PATH", help="manifest (overrides paths.data)")
    p.add_argument("--steps", type=int, help="stop after this many steps in total")
    p.add_argument("--strategy", choices=("marginal", "even"))

    p = sub.add_parser("sample", parents=[common], help="generate N images in one pass")
    p.add_argument("--checkpoint", metavar="PATH", help="trained weights (overrides paths.checkpoint)")
    p.add_argument("--refs", type=_csv, default=[], metavar="CSV", help="reference image paths")
    p.add_argument("--prompt", required=True, metavar="STR")
    p.add_argument("--n-out", type=int, default=1, metavar="N")
    p.add_argument("--steps", type=int, help="sampler steps")
    p.add_argument("--cfg-scale", type=float, metavar="X")
    p.add_argument("--strategy", choices=("marginal", "even"), default="marginal")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="output size without refs")

    p = sub.add_parser("eval", parents=[common], help="identity and consistency scores as JSON")
    p.add_argument("--gen", type=_csv, required=True, metavar="CSV", help="generated images")
    p.add_argument("--refs", type=_csv, required=True, metavar="CSV", help="reference images")
    p.add_argument("--gen-masks", type=_csv, metavar="CSV", help="foreground masks for --gen")
    p.add_argument("--ref-masks", type=_csv, metavar="CSV", help="foreground masks for --refs")
    p.add_argument("--prompt", default="", metavar="STR", help="instruction shown to the VLM judge")
    p.add_argument("--vlm", metavar="URL", help="judge endpoint, or stub:N for a fixed offline score")

    p = sub.add_parser("ablate-rope", parents=[common], help="paired marginal/even runs on the toy edit task")
    p.add_argument("--steps", type=int, help="training steps per strategy")
    return ap


def _setup_logging() -> None:
    level = os.environ.get("IMONTAGE_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def cmd_curate(cfg: RunConfig, args) -> None:
    from .data.buckets import make_buckets
    from .data.io import write_manifest
    from .data.motion import filter_pairs
    from .data.scenes import gen_corpus

    c = cfg.corpus
    out = Path(args.out)
    buckets = make_buckets(cfg.bucket_dims(), patch=cfg.model_config().patch)
    records = gen_corpus(cfg.scene_spec(), c.n, cfg.seed, out, buckets=buckets, workers=c.workers)
    video = [r for r in records if r.motion_score is not None]
    if video:
        kept = {r.id: r for r in filter_pairs(video, c.motion_threshold, c.motion_upweight)}
        records = [kept.get(r.id) if r.motion_score is not None else r for r in records]
        records = [r for r in records if r is not None]
    write_manifest(out / "manifest.jsonl", records)
    log.info("wrote %d records to %s", len(records), out / "manifest.jsonl")


def cmd_train(cfg: RunConfig, args) -> None:
    from .data.io import read_manifest
    from .train.loop import train

    data = args.data or cfg.paths.data
    if not data:
        raise ConfigError("no manifest: pass --data or set paths.data")
    tcfg = cfg.train_config()
    tcfg.run_digest = cfg.digest()
    if args.steps is not None:
        tcfg.max_steps = args.steps
    if args.strategy:
        tcfg.strategy = args.strategy
    hq = read_manifest(cfg.paths.hq_data) if cfg.paths.hq_data else None
    train(tcfg, read_manifest(data), data, args.out, seed=cfg.seed, hq_records=hq)
    log.info("training done; checkpoint at %s", Path(args.out) / "final.imtg")


def cmd_sample(cfg: RunConfig, args) -> None:
    from .ablation import image_grid
    from .data.io import load_image, save_image
    from .flow import sample
    from .model import init_params
    from .train.loop import load_params

    if args.n_out < 1:
        raise ConfigError("--n-out must be >= 1")
    model_cfg = cfg.model_config()
    ckpt = args.checkpoint or cfg.paths.checkpoint
    if ckpt:
        params, model_cfg = load_params(ckpt)
    else:
        log.warning("no checkpoint given; sampling from freshly initialized weights")
        params = init_params(model_cfg, cfg.seed)
    scfg = cfg.sampler_config()
    overrides = {"seed": cfg.seed}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.cfg_scale is not None:
        overrides["cfg_scale"] = args.cfg_scale
    from dataclasses import replace

    scfg = replace(scfg, **overrides)
    refs = [load_image(p) for p in args.refs]
    size = tuple(args.size) if args.size else None
    outs = sample(params, model_cfg, refs, args.prompt, args.n_out, scfg, size=size, strategy=args.strategy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(outs):
        save_image(out / f"out_{k + 1}.png", img)
    rows = ([refs] if refs and all(r.shape == outs[0].shape for r in refs) else []) + [outs]
    save_image(out / "grid.png", image_grid(rows))


def cmd_eval(cfg: RunConfig, args) -> None:
    from .data.io import load_image, load_mask
    from .metrics import evaluate

    gen = [load_image(p) for p in args.gen]
    refs = [load_image(p) for p in args.refs]

    def masks(paths, images, flag):
        if paths is None:
            return [np.ones(im.shape[:2], dtype=bool) for im in images]
        if len(paths) != len(images):
            raise ConfigError(f"{flag} needs one mask per image")
        return [load_mask(p) for p in paths]

    report = evaluate(gen, masks(args.gen_masks, gen, "--gen-masks"), refs, masks(args.ref_masks, refs, "--ref-masks"))
    if args.vlm:
        from .vlm import VlmClient

        if args.vlm.startswith("stub:"):
            client = VlmClient(stub_score=int(args.vlm[5:]))
        else:
            client = VlmClient(endpoint=args.vlm)
        jobs = [(refs + gen, args.prompt, "id_preservation")]
        if len(gen) >= 2:
            jobs.append((gen, args.prompt, "temporal_consistency"))
        report.vlm = [vars(r) for r in client.rate_many(jobs)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    print(report.to_json())


def cmd_ablate(cfg: RunConfig, args) -> None:
    from dataclasses import replace

    from .ablation import rope_ablation, write_ablation

    sec = cfg.ablation if args.steps is None else replace(cfg.ablation, steps=args.steps)
    model_cfg = cfg.model_config()
    res = rope_ablation(sec, cfg.seed, model_cfg)
    write_ablation(res, args.out, model_cfg, cfg.seed)
    m, e = res.final
    print(f"final validation loss: marginal {m:.5f}  even {e:.5f}")


COMMANDS = {"curate": cmd_curate, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "ablate-rope": cmd_ablate}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    _setup_logging()
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        COMMANDS[args.cmd](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except (MontageError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
