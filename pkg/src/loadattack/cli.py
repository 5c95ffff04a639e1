"""Command-line entry point.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import ConfigError, ExperimentConfig, StageError, aggregate_reports, run_pipeline, run_sweep

SUBCOMMANDS = {
    "train": "train (or reuse) the configured victim agent",
    "atla": "train the victim with a learned adversary",
    "attack": "run the configured attack and write logs and a report",
    "snoop": "run a black-box attack through a behaviour-cloned proxy",
    "detect": "attack, then run the MMD plausibility tests",
    "sweep": "run the epsilon sweep for each configured seed",
    "report": "aggregate every run report under --out into one table",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    parser = _Parser(prog="loadattack", description="Attacks, detection and robust training for battery controllers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in SUBCOMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        overrides["seed"] = args.seed
    if args.out:
        overrides["out"] = args.out
    return config.with_overrides(**overrides) if overrides else config


def execute(args) -> str:
    if args.command == "report":
        if not args.out and not args.config:
            raise ConfigError("report needs --out <dir>")
        return aggregate_reports(args.out or _config(args)["out"])
    config = _config(args)
    if args.command == "train":
        report = run_pipeline(config, stages=["train", "report"])
    elif args.command == "atla":
        report = run_pipeline(config.with_overrides(**{"agent.training": "atla"}), stages=["train", "report"])
    elif args.command == "attack":
        report = run_pipeline(config)
    elif args.command == "snoop":
        report = run_pipeline(config, procedure="snoop")
    elif args.command == "detect":
        report = run_pipeline(config, stages=["train", "attack", "detect", "report"])
    else:
        reports = run_sweep(config)
        return aggregate_reports(config["out"]) if reports else ""
    return report.table()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"loadattack: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        text = execute(args)
    except ConfigError as exc:
        print(f"loadattack: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"loadattack: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"loadattack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(text, end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
