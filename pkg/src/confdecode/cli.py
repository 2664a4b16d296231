"""Command-line entry point.

Every stage reads its inputs from the output directory, writes its outputs
there, and prints a one-line JSON summary. Exit codes: 0 success, 2 config
error, 3 stage/format error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import RunConfig
from .errors import (FormatError, InsufficientData, InvalidConfig, NumericalError, StageError, TrainingError,
                     UnknownOperatingPoint)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("synth", "split", "train", "calibrate", "evaluate", "sweep")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags below override it")
    common.add_argument("--out", help="output directory (output_dir)")
    common.add_argument("--seed", type=int, help="master seed (master_seed)")
    common.add_argument("--members", type=int, help="ensemble size M (ensemble.M)")
    common.add_argument("--score", choices=["entropy", "margin", "mi"], help="uncertainty score (selective.score_kind)")
    common.add_argument("--coverage-grid", type=_csv_floats, help="comma-separated coverage levels (selective.grid)")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override any config field, e.g. train.epochs_max=50")
    common.add_argument("--workers", type=int, default=1, help="parallel member-training processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="confdecode",
                                     description="Calibrated deep-ensemble decoding with coverage-targeted abstention.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate the synthetic trial set",
        "split": "block-stratified split and training-set channel statistics",
        "train": "train ensemble members",
        "calibrate": "fit per-member temperatures on the calibration split",
        "evaluate": "selective evaluation; writes report.json, curve.csv, predictions.jsonl",
        "sweep": "compare nested ensemble sizes",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "sweep":
            p.add_argument("--m-list", type=_csv_ints, default=[1, 2, 4, 8], help="ensemble sizes, e.g. 1,2,4,8")
            p.add_argument("--seeds", type=_csv_ints, help="extra master seeds (participants) to train and sweep")
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.members is not None:
        cfg.ensemble.M = args.members
    if args.score is not None:
        cfg.selective.score_kind = args.score
    if args.coverage_grid is not None:
        cfg.selective.grid = args.coverage_grid
    errs = []
    for item in args.set:
        path, sep, value = item.partition("=")
        if not sep:
            errs.append(f"--set expects PATH=VALUE, got {item!r}")
            continue
        try:
            cfg.override(path.strip(), value)
        except InvalidConfig as exc:
            errs += exc.errors
    if errs:
        raise InvalidConfig(errs)
    return cfg.check()


def run_command(args) -> dict:
    cfg = load_config(args)
    if args.command == "synth":
        return pipeline.stage_synth(cfg)
    if args.command == "split":
        return pipeline.stage_split(cfg)
    if args.command == "train":
        return pipeline.stage_train(cfg, workers=args.workers)
    if args.command == "calibrate":
        return pipeline.stage_calibrate(cfg)
    if args.command == "evaluate":
        return pipeline.stage_evaluate(cfg)
    return pipeline.stage_sweep(cfg, args.m_list, args.seeds, workers=args.workers)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run_command(args)
    except (InvalidConfig, InsufficientData, UnknownOperatingPoint) as exc:
        errors = getattr(exc, "errors", [str(exc)])
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, FormatError) as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (NumericalError, TrainingError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
