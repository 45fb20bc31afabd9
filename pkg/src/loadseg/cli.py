"""Command-line entry point: ``loadseg <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .autodiff import ContractError, NumericError
from .data import save_dataset
from .experiment import (
    SPLITS,
    ExperimentConfig,
    build_splits,
    check_compatible,
    events_from_jsonl,
    events_to_jsonl,
    export_convergence_csv,
    load_config,
    set_config_value,
    stage1_curve_csv,
    stage1_train,
    stage2_load,
    write_manifest,
)
from .io import atomic_write_text
from .metrics import evaluate_model_miou
from .models import load_checkpoint, save_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="loadseg", description="Lookahead adversarial segmentation lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write train/val/holdout dataset files")
    sub.add_parser("train-baseline", parents=[common], help="stage 1: pixel-wise CE training")
    p = sub.add_parser("train-load", parents=[common], help="stage 2: LoAd from a baseline checkpoint")
    p.add_argument("--checkpoint", help="stage-1 checkpoint (default: <out>/baseline.ckpt)")
    p = sub.add_parser("eval", parents=[common], help="mIoU of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLITS, default="holdout")
    p = sub.add_parser("export-curve", parents=[common], help="event log (JSON lines) to convergence CSV")
    p.add_argument("--events", required=True)
    p.add_argument("--csv", required=True)
    return parser


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        set_config_value(config, "seed", str(args.seed))
    if args.out is not None:
        config.out = args.out
    config.validate()
    return config


def _gen_data(config: ExperimentConfig, args) -> None:
    out = Path(config.out)
    splits = build_splits(config)
    for name, ds in splits.items():
        save_dataset(ds, out / f"{name}.ldsd")
    write_manifest(config, "gen-data", {f"{k}_size": len(v) for k, v in splits.items()})
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))


def _train_baseline(config: ExperimentConfig, args) -> None:
    out = Path(config.out)
    splits = build_splits(config)
    result = stage1_train(config, splits)
    save_checkpoint(result.model, out / "baseline.ckpt")
    atomic_write_text(out / "stage1_curve.csv", stage1_curve_csv(result.curve))
    holdout = evaluate_model_miou(result.model, splits["holdout"])
    write_manifest(config, "train-baseline", {"baseline_val_miou": result.val_miou,
                                              "baseline_holdout_miou": holdout})
    print(f"val_miou={result.val_miou:.6f} holdout_miou={holdout:.6f}")


def _train_load(config: ExperimentConfig, args) -> None:
    if not args.config:
        raise UsageError("train-load requires --config")
    out = Path(config.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "baseline.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    result = stage2_load(config, ckpt)
    save_checkpoint(result.trainer.generator, out / "best.ckpt")
    atomic_write_text(out / "events.jsonl", events_to_jsonl(result.load.events))
    export_convergence_csv(result.load.events, out / "convergence.csv")
    write_manifest(config, "train-load", {
        "g0_checkpoint": str(ckpt),
        "baseline_holdout_miou": result.baseline_holdout_miou,
        "best_holdout_miou": result.best_holdout_miou,
        "mu_star": result.load.best_miou,
        "cycles": len(result.load.cycles),
        "peak_found": result.load.peak_found,
        "aborted": result.load.aborted or "no",
    })
    print(f"baseline_miou={result.baseline_holdout_miou:.6f} best_miou={result.best_holdout_miou:.6f} "
          f"cycles={len(result.load.cycles)}")


def _eval(config: ExperimentConfig, args) -> None:
    model = load_checkpoint(args.checkpoint)
    check_compatible(model, config)
    split = build_splits(config)[args.split]
    print(f"miou={evaluate_model_miou(model, split):.6f}")


def _export_curve(config: ExperimentConfig, args) -> None:
    events = events_from_jsonl(Path(args.events).read_text(encoding="utf-8"))
    export_convergence_csv(events, args.csv)
    print(f"rows={len(events)}")


COMMANDS = {
    "gen-data": _gen_data,
    "train-baseline": _train_baseline,
    "train-load": _train_load,
    "eval": _eval,
    "export-curve": _export_curve,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](_config(args), args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (ContractError, NumericError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
