"""``attnfix`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..numkernel import ContractError, NumericError
from .config import RunConfig, preset
from .pipeline import Run

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2

STAGES = {
    "gen-data": "gen_data",
    "poison": "poison",
    "train-victim": "train_victim",
    "invert-trigger": "invert_trigger",
    "build-debugset": "build_debugset",
    "train-detector": "train_detector",
    "build-qref": "build_qref",
    "evaluate": "evaluate",
    "ablate": "ablate",
    "probe-zero-column": "probe_zero_column",
    "bench-latency": "bench_latency",
    "run-all": "run_all",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnfix", description="Runtime attention hot-fix experiments.")
    sub = p.add_subparsers(dest="command", metavar="command")
    for name in STAGES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON RunConfig; defaults to the scenario preset")
        s.add_argument("--scenario", choices=("backdoor", "unfairness"), default="backdoor",
                       help="preset used when --config is absent")
        s.add_argument("--seed", type=int)
        s.add_argument("--tau", type=float)
        s.add_argument("--mode", choices=("streaming", "two_pass"))
        s.add_argument("--out")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else preset(args.scenario)
    seeds = None
    if args.seed is not None:
        seeds = [args.seed] + [s for s in cfg.seeds[1:] if s != args.seed]
    return cfg.with_overrides(seeds=seeds, tau=args.tau, mode=args.mode, out=args.out)


def _summary(result):
    if hasattr(result, "to_dict"):
        return result.to_dict()
    return result


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        run = Run(cfg)
        run.root.mkdir(parents=True, exist_ok=True)
        cfg.save(run.root / "config.json")
        result = getattr(run, STAGES[args.command])()
    except (ContractError, NumericError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps({"command": args.command, "result": _summary(result)}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
