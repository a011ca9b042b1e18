"""Command-line entry points.

    cdpo gen-data   [config options]
    cdpo train-bias --seed N
    cdpo train      --mode {grpo,cdpo,bias} --seed N
    cdpo eval       --ckpt PATH [--split eval|train|bias]
    cdpo diagnose
    cdpo pipeline
    cdpo report

Configuration comes from built-in defaults, optionally a json config file
(--config), then individual --set key=value overrides. --out (or the
CDPO_OUTPUT_ROOT environment variable) picks the artifact directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigurationError
from .harness import (
    ExperimentConfig,
    config_hash,
    ensure_data,
    evaluate,
    gen_data,
    prepare_examples,
    report,
    run_diagnostic,
    run_pipeline,
    train_single,
)
from .policy import load_checkpoint

OUTPUT_ENV = "CDPO_OUTPUT_ROOT"


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    data: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            data.update(json.load(fh))
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        data[key] = value
    if getattr(args, "out", None):
        data["output_dir"] = args.out
    elif "output_dir" not in data and os.environ.get(OUTPUT_ENV):
        data["output_dir"] = os.environ[OUTPUT_ENV]
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="json file with ExperimentConfig fields")
    parser.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or 'runs')")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a single config field; repeatable")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cdpo", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate worlds and question splits")
    _add_common(p)

    p = sub.add_parser("train-bias", help="phase 1: shortcut model on the stripped split")
    _add_common(p)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("train", help="train one arm for one seed")
    _add_common(p)
    p.add_argument("--mode", choices=("grpo", "cdpo", "bias"), required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("eval", "train", "bias"), default="eval")

    p = sub.add_parser("diagnose", help="before/after probe of reward-chasing training")
    _add_common(p)

    p = sub.add_parser("pipeline", help="full multi-seed two-phase run plus report")
    _add_common(p)

    p = sub.add_parser("report", help="aggregate existing artifacts")
    _add_common(p)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        cfg = build_config(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "gen-data":
            paths = gen_data(cfg)
            print(f"config {config_hash(cfg)}")
            for name, path in paths.items():
                print(f"{name}: {path}")
        elif args.command in ("train-bias", "train"):
            mode = "bias" if args.command == "train-bias" else args.mode
            path = train_single(cfg, args.seed, mode)
            print(f"wrote {path}")
        elif args.command == "eval":
            dataset = ensure_data(cfg)
            params, meta = load_checkpoint(args.ckpt)
            split = {"eval": dataset.eval, "train": dataset.train, "bias": dataset.bias}[args.split]
            rep = evaluate(params, prepare_examples(split, dataset.worlds))
            print(json.dumps({"checkpoint": meta, "split": args.split,
                              "report": rep.as_dict()}, sort_keys=True, indent=1))
        elif args.command == "diagnose":
            summary = run_diagnostic(cfg)
            print(f"mean inferential delta: {summary['mean_inferential_delta']:+.4f} "
                  f"over {len(summary['seeds'])} seeds")
            print(f"wrote {os.path.join(cfg.output_dir, 'diagnostic.json')}")
        elif args.command == "pipeline":
            summary = run_pipeline(cfg)
            paired = summary.get("paired_inferential")
            if paired:
                print(f"inferential accuracy: cdpo {paired['mean_cdpo']:.4f} "
                      f"vs grpo {paired['mean_grpo']:.4f} "
                      f"(one-sided p={paired['one_sided_pvalue']:.4g})")
            print(f"wrote {os.path.join(cfg.output_dir, 'summary.json')}")
        elif args.command == "report":
            summary = report(cfg)
            print(f"aggregated {len(summary['seeds_reported'])} seeds; "
                  f"{len(summary['warnings'])} warnings")
            print(f"wrote {os.path.join(cfg.output_dir, 'summary.json')}")
    except Exception as exc:  # surface a clean one-liner, keep trace in verbose
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
