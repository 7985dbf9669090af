"""Command line entry point: ``thermobound {bound,entropy,sweep,train,sample}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .checkpoint import CheckpointError
from .harness import EXIT_CONFIG, EXIT_NUMERIC, ConfigError, ExperimentConfig

COMMANDS = {
    "bound": harness.cmd_bound,
    "entropy": harness.cmd_entropy,
    "sweep": harness.cmd_sweep,
    "train": harness.cmd_train,
    "sample": harness.cmd_sample,
}

EPILOG = "exit codes: 0 pass, 2 config error, 3 numerical failure, 4 invariant violation"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thermobound", description=__doc__, epilog=EPILOG)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0], epilog=EPILOG)
        p.add_argument("--config", metavar="PATH", help="YAML config; defaults are used for missing keys")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="override estimation and training seeds")
        p.add_argument("--grid", type=int, help="number of time-grid nodes")
        p.add_argument("--batch", type=int, help="Monte-Carlo batch size")
        p.add_argument("--ode-steps", type=int, help="RK4 steps for the probability-flow ODE")
        p.add_argument("--format", action="append", choices=["csv", "json", "svg"],
                       help="output format; repeat for several (default: all)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--workers", type=int, help="worker processes for sweep cells")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("thermobound")
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_dict({})
        if args.command == "sweep" and "sweep" not in cfg.tree:
            cfg.tree["sweep"] = dict(harness.DEFAULT_SWEEP)
        cfg = cfg.override(seed=args.seed, grid=args.grid, batch=args.batch, ode_steps=args.ode_steps,
                           out=args.out, fmt=args.format)
        if args.command == "sweep":
            return harness.cmd_sweep(cfg, args.workers)
        return COMMANDS[args.command](cfg)
    except (ConfigError, CheckpointError) as exc:
        log.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.NUMERIC_ERRORS as exc:
        log.error("%s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
