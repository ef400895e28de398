"""``gac <subcommand> --config <path> [--seed u64] [--out <path>] [--threads n]``.

Exit codes: 0 when every row passes, 1 for usage or config errors, 2 when rows are flagged.
"""

import argparse
import sys
from logging import getLogger
from pathlib import Path
from typing import Any, Optional, Sequence

from sqlalchemy.exc import SQLAlchemyError

from app.config import ExperimentConfig, ExperimentKind, load_config, validate_config
from app.database import save_run
from app.errors import ConfigError, ToolkitError
from app.harness import run
from app.startup import startup

logger = getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FLAGGED = 2

SUBCOMMANDS = {
    "simulate": ExperimentKind.SIMULATE,
    "moments": ExperimentKind.MOMENTS,
    "cutoff": ExperimentKind.CUTOFF,
    "divergence": ExperimentKind.DIVERGENCE_SWEEP,
    "bound": ExperimentKind.BOUND_SWEEP,
    "mle": ExperimentKind.MLE_SWEEP,
    "verify": ExperimentKind.VERIFY,
}


class ToolkitArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> ToolkitArgumentParser:
    parser = ToolkitArgumentParser(prog="gac", description="Group action channel experiments")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=ToolkitArgumentParser)
    for name, kind in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=f"run a {kind} experiment")
        sub.add_argument("--config", type=Path, required=kind != ExperimentKind.VERIFY, help="TOML experiment file")
        sub.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
        sub.add_argument("--out", type=Path, help="CSV output path (overrides the config)")
        sub.add_argument("--threads", type=int, help="worker threads (falls back to GAC_THREADS)")
        sub.add_argument("--verbose", action="store_true", help="log at DEBUG level")
        if kind == ExperimentKind.VERIFY:
            sub.add_argument("--shift-convention", choices=["standard", "transposed"], default=None)
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict[str, Any] = {
        "experiment": str(SUBCOMMANDS[args.command]),
        "seed": args.seed,
        "output": str(args.out) if args.out else None,
        "threads": args.threads,
    }
    if getattr(args, "shift_convention", None):
        overrides["verify"] = {"shift_convention": args.shift_convention}
    if args.config is not None:
        return load_config(args.config, overrides)
    return validate_config({key: value for key, value in overrides.items() if value is not None})


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    startup(verbose=args.verbose)
    try:
        config = _config_from_args(args)
    except ConfigError as error:
        logger.error("invalid config: %s", error)
        return EXIT_USAGE

    try:
        outcome = run(config)
    except ToolkitError:
        logger.exception("%s experiment aborted", config.experiment)
        return EXIT_FLAGGED

    try:
        save_run(outcome.record)
    except SQLAlchemyError:
        logger.exception("could not record the run in the database")

    logger.info(
        "%s: %d rows written to %s, %d flagged",
        config.experiment, outcome.record.n_rows, outcome.csv_path, outcome.record.n_flagged,
    )
    return EXIT_FLAGGED if outcome.exit_code else EXIT_OK
