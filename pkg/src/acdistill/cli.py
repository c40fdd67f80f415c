"""Command-line entry point: ``acdistill <subcommand> ...``.

Environment variables:

``ACDISTILL_LOG_LEVEL``
    logging level name (default ``INFO``).
``ACDISTILL_DEVICE``
    torch device; only ``cpu`` is supported by the training loop today.
``ACDISTILL_THREADS``
    optional intra-op thread count for torch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .config import TrainConfig, apply_overrides, preset

log = logging.getLogger("acdistill")


def _setup_env() -> None:
    level = os.environ.get("ACDISTILL_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    device = os.environ.get("ACDISTILL_DEVICE", "cpu")
    if device != "cpu":
        raise SystemExit(f"ACDISTILL_DEVICE={device!r} is not supported; use cpu")
    threads = os.environ.get("ACDISTILL_THREADS")
    if threads:
        torch.set_num_threads(int(threads))


def _steps_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _load_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(args.config)
    else:
        cfg = preset(args.preset or "desk")
    if args.config and args.preset:
        raise SystemExit("--config and --preset are mutually exclusive")
    cfg = apply_overrides(cfg, args.set or [])
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=["full", "toy", "desk"], help="start from a named preset instead of a file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. distill.lambda_adv=0.25")
    p.add_argument("--out", help="output directory (overrides out_dir)")


def cmd_train_teacher(args) -> int:
    from .training import train_teacher

    cfg = _load_config(args)
    ck = train_teacher(cfg, resume=args.resume)
    print(Path(cfg.out_dir) / "teacher.ckpt", f"iterations={ck.iteration}")
    return 0


def cmd_distill(args) -> int:
    from .training import run_distill

    cfg = _load_config(args)
    if args.lambda_adv is not None:
        cfg.distill.lambda_adv = args.lambda_adv
    if args.no_adv:
        cfg.distill.adversarial = False
    run_distill(cfg, args.teacher)
    print(Path(cfg.out_dir) / "student.ckpt")
    return 0


def cmd_sample(args) -> int:
    from .evaluation import sample_files

    for p in sample_files(args.checkpoint, args.input, args.out, steps=args.steps, seed=args.seed, use_ema=args.ema):
        print(p)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    out = args.out or str(Path(args.checkpoint).with_suffix("")) + "_eval"
    if args.method == "consistency":
        reports = evaluate(args.checkpoint, args.manifest, _steps_list(args.steps), out, seed=args.seed, use_ema=args.ema)
    else:
        reports = evaluate(args.checkpoint, args.manifest, out_dir=out, seed=args.seed, method=args.method, use_ema=args.ema)
    print(json.dumps({k: r.summary() for k, r in reports.items()}, indent=2))
    return 0


def cmd_bench(args) -> int:
    from .evaluation import bench

    rows = bench(args.checkpoint, [m.strip() for m in args.methods.split(",")], reps=args.reps, warmup=args.warmup, out_csv=args.csv)
    for r in rows:
        sp = r["speedup_vs_ancestral"]
        print(f"{r['method']:<12} steps={r['steps']:<5} median_ms={r['median_ms']:.2f} speedup={'' if sp is None else f'{sp:.1f}x'}")
    return 0


def cmd_make_toy(args) -> int:
    from .data import make_toy_dataset

    for split, n, seed in (("train", args.n, args.seed), ("test", args.n_test, args.seed + 1)):
        if n:
            m = make_toy_dataset(n, args.size, seed, args.out, split=split)
            print(Path(args.out) / f"manifest_{split}.json", f"pairs={len(m.pairs)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acdistill", description="Adversarial consistency distillation for conditional diffusion.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train the noise-prediction teacher")
    _add_config_args(p)
    p.add_argument("--resume", help="teacher checkpoint to resume from")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a teacher into a few-step student")
    _add_config_args(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--lambda-adv", type=float, dest="lambda_adv")
    p.add_argument("--no-adv", action="store_true", help="plain consistency distillation (no discriminator)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sample", help="translate condition images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="a condition PNG or a directory of them")
    p.add_argument("--steps", type=int, default=8, help="denoiser evaluations")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.add_argument("--ema", action="store_true", help="use EMA weights when present")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", default="1,2,4,8,16")
    p.add_argument("--method", default="consistency", help="consistency, ancestral or ddim:N")
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--out")
    p.add_argument("--ema", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="sampler latency benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--methods", default="ancestral,ddim:100,consistency:8,consistency:16")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--csv", help="write results as CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("make-toy", help="generate the procedural paired dataset")
    p.add_argument("--n", type=int, default=512, help="training pairs")
    p.add_argument("--n-test", type=int, default=64, dest="n_test", help="test pairs (0 to skip)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_toy)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_env()
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
