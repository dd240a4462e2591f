"""Command line entry point.

Subcommands mirror the study pipelines; every run writes its CSV outputs
and a meta.json (configuration, hash, runtime, versions) into --out.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 uniformity violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .errors import ConfigError, NumericalError, UniformityError
from .experiments import (
    ExperimentConfig,
    convergence_study,
    desk_config,
    full_config,
    kl_build_run,
    lcurve_study,
    load_config,
    run_forward,
    run_forward_uq,
    run_inverse,
    run_inverse_uq,
)

logger = logging.getLogger(__name__)

_COMMANDS = (
    "forward",
    "inverse",
    "uq-forward",
    "uq-inverse",
    "converge",
    "kl-build",
    "lcurve",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecguq",
        description="Boundary-integral electrocardiography with shape-uncertainty studies",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", type=Path, default=None, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker process count")
        p.add_argument(
            "--scale",
            choices=("desk", "full"),
            default="desk",
            help="preset used when no --config is given",
        )
    return parser


def effective_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        config = load_config(args.config)
    else:
        config = desk_config() if args.scale == "desk" else full_config()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        config = dataclasses.replace(config, seed=args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return config


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = effective_config(args)
        out = args.out
        if args.command == "forward":
            run_forward(config, out_dir=out)
        elif args.command == "inverse":
            run_inverse(config, out_dir=out)
        elif args.command == "uq-forward":
            run_forward_uq(config, out_dir=out, threads=args.threads)
        elif args.command == "uq-inverse":
            run_inverse_uq(config, out_dir=out, threads=args.threads)
        elif args.command == "converge":
            convergence_study(config, out_dir=out, threads=args.threads)
        elif args.command == "kl-build":
            kl_build_run(config, out_dir=out)
        elif args.command == "lcurve":
            lcurve_study(config, out_dir=out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except UniformityError as exc:
        print(f"uniformity violation: {exc}", file=sys.stderr)
        return 4
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    logger.info("%s finished; outputs in %s", args.command, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
