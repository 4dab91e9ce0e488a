"""Command-line entry point: ``dust <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data
from .ablation import run_ablation
from .checkpoint import CheckpointError
from .config import ABLATION_MODES, ConfigError, ExperimentConfig
from .metrics import evaluate_model
from .ranking import CheckpointSet, rank_and_partition
from .training import TrainingError, load_teacher, run_pipeline
from .unet import ShapeError, predict_main_labels

log = logging.getLogger("dust")

MODE_ALIASES = {"st+sample": "st_sample", "st+sample+pixel": "full"}


class CommandError(RuntimeError):
    pass


def _mode(value: str) -> str:
    value = MODE_ALIASES.get(value, value)
    if value not in ABLATION_MODES:
        raise argparse.ArgumentTypeError(f"mode must be one of {ABLATION_MODES}")
    return value


def _seeds(value: str) -> list[int]:
    try:
        return [int(s) for s in value.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {value!r}") from None


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "dataset", None):
        changes["dataset"] = args.dataset
    if getattr(args, "mode", None):
        changes["ablation_mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _load_ckpt(path: str):
    if not Path(path).is_file():
        raise CommandError(f"checkpoint not found: {path}")
    return checkpoint.load(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    divisor = 2 ** (args.depth - 1)
    if args.size % divisor:
        raise CommandError(f"--size {args.size} must be divisible by {divisor} for depth {args.depth}")
    out = _prepare_out(args.out, args.force)
    counts = {"labeled": args.labeled, "unlabeled": args.unlabeled, "val": args.val, "test": args.test}
    manifest = data.generate(out, counts, args.seed, args.size, (args.difficulty_min, args.difficulty_max), divisor)
    total = sum(manifest.counts.values())
    split_text = ", ".join(f"{k}={v}" for k, v in manifest.counts.items())
    print(f"wrote {total} samples to {out} ({split_text}; size {args.size}, seed {args.seed})")
    return 0


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    res = run_pipeline(cfg, out)
    agg = res.report.aggregate()
    print(f"mode {cfg.ablation_mode} seed {cfg.seed}: test dice {agg['dice_mean']:.4f} "
          f"jaccard {agg['jaccard_mean']:.4f} hd95 {agg['hd95_mean']:.3f} asd {agg['asd_mean']:.3f}")
    print(f"artifacts in {out}")
    return 0


def cmd_ablate(args) -> int:
    if len(args.seeds) < 2:
        log.warning("fewer than 2 seeds: no significance output")
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    cfg.save(out / "config.resolved.json")
    summary = run_ablation(cfg, args.seeds, out, args.arms)
    print(summary.table(), end="")
    return 0 if not summary.errors else 1


def cmd_rank(args) -> int:
    teacher = Path(args.teacher)
    if not (teacher / "checkpoints.json").is_file():
        raise CommandError(f"no teacher checkpoints under {teacher}")
    ckpts: CheckpointSet = load_teacher(teacher)
    ds = data.Dataset(args.dataset)
    out = _prepare_out(args.out, args.force)
    ids = ds.ids(args.split)
    images, _ = ds.stack(ids, args.crop)
    ranking = rank_and_partition(ckpts, ids, images, args.fraction)
    ranking.to_csv(out / "ranking.csv")
    print(f"ranked {len(ids)} samples; {len(ranking.reliable)} reliable -> {out / 'ranking.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_ckpt(args.checkpoint)
    ds = data.Dataset(args.dataset)
    out = _prepare_out(args.out, args.force)
    report = evaluate_model(model, ds, args.split, args.crop, meta={"checkpoint": str(args.checkpoint)})
    report.write(out / "metrics.json")
    agg = report.aggregate()
    print(json.dumps({k: round(v, 6) for k, v in agg.items()}, indent=2))
    return 0


def cmd_predict(args) -> int:
    model = _load_ckpt(args.checkpoint)
    ds = data.Dataset(args.dataset)
    out = _prepare_out(args.out, args.force)
    ids = ds.ids(args.split)
    images, _ = ds.stack(ids, args.crop)
    labels = predict_main_labels(model, images)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for sid, lab in zip(ids, labels):
        data.write_pgm(pred_dir / f"{sid}.pgm", lab.astype(np.uint8))
    print(f"wrote {len(ids)} masks to {pred_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dust", description="Dual-uncertainty self-training for segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_out(p, what):
        p.add_argument("--out", required=True, help=f"output directory for {what}")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    add_out(p, "the dataset")
    p.add_argument("--labeled", type=int, default=6, help="labeled training samples (default 6)")
    p.add_argument("--unlabeled", type=int, default=54, help="unlabeled training samples (default 54)")
    p.add_argument("--val", type=int, default=10, help="validation samples (default 10)")
    p.add_argument("--test", type=int, default=20, help="test samples (default 20)")
    p.add_argument("--size", type=int, default=80, help="canvas side in pixels (default 80)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--difficulty-min", type=float, default=0.0, help="lower difficulty bound (default 0)")
    p.add_argument("--difficulty-max", type=float, default=1.0, help="upper difficulty bound (default 1)")
    p.add_argument("--depth", type=int, default=4, help="network depth the size must suit (default 4)")
    p.set_defaults(func=cmd_gen_data)

    def add_config(p):
        p.add_argument("--config", help="JSON experiment config; omitted keys take defaults")
        p.add_argument("--dataset", help="dataset directory, overrides the config")

    p = sub.add_parser("run", help="run one ablation arm end to end")
    add_config(p)
    add_out(p, "the run")
    p.add_argument("--mode", type=_mode, help=f"ablation arm, one of {', '.join(ABLATION_MODES)}")
    p.add_argument("--seed", type=int, help="seed, overrides the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run every arm for several seeds and tabulate")
    add_config(p)
    add_out(p, "all runs and the summary")
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2], help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--arms", type=_mode, nargs="+", default=list(ABLATION_MODES),
                   help="arms to run (default: all four)")
    p.set_defaults(func=cmd_ablate)

    def add_eval_common(p):
        p.add_argument("--dataset", required=True, help="dataset directory")
        p.add_argument("--crop", type=int, default=64, help="center-crop side (default 64)")

    p = sub.add_parser("rank", help="rank samples by checkpoint disagreement")
    p.add_argument("--teacher", required=True, help="directory holding ck_*.ckpt and checkpoints.json")
    add_eval_common(p)
    add_out(p, "ranking.csv")
    p.add_argument("--split", default="unlabeled", help="split to rank (default unlabeled)")
    p.add_argument("--fraction", type=float, default=0.5, help="reliable fraction (default 0.5)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    add_eval_common(p)
    add_out(p, "metrics.json")
    p.add_argument("--split", default="test", help="split to evaluate (default test)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write predicted masks as PGM files")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    add_eval_common(p)
    add_out(p, "predictions/")
    p.add_argument("--split", default="test", help="split to predict (default test)")
    p.set_defaults(func=cmd_predict)
    return parser


def _thread_limit():
    value = os.environ.get("DUST_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    try:
        n = int(value)
    except ValueError:
        raise CommandError(f"DUST_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise CommandError(f"DUST_THREADS must be a positive integer, got {value!r}")
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (CommandError, ConfigError, CheckpointError, TrainingError, ShapeError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"dust {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
