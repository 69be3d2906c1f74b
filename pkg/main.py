import argparse
import json
import logging
import logging.config
import sys
from collections.abc import Sequence
from typing import Any

from src.constants import LOGGER_NAME, BackendKind, Oracle, Preset, Subcommand, Target, VerifyCheck
from src.report_utils import resource_path
from src.runner import run

# Set up logging
logger = logging.getLogger(LOGGER_NAME)
with open(resource_path("logging_config.json")) as config:
    logging_config = json.load(config)
logging.config.dictConfig(logging_config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zakai-lab",
        description="Numerical laboratory for the unnormalised filtering semigroup.",
    )
    parser.add_argument("subcommand", choices=[s.value for s in Subcommand])
    parser.add_argument(
        "check",
        nargs="?",
        choices=[c.value for c in VerifyCheck],
        help="verify only: which identity or bound to check",
    )
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--y-seed", type=int, help="seed of the observation path")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--results-dir", help="overrides $ZAKAI_LAB_RESULTS")
    parser.add_argument("--k", type=int, help="depth of iterated integrals")
    parser.add_argument("--levels", type=int, help="highest expansion level")
    parser.add_argument("--time", type=float, help="horizon T")
    parser.add_argument("--steps", type=int, help="time steps M")
    parser.add_argument("--preset", choices=[p.value for p in Preset])
    parser.add_argument("--backend", choices=[b.value for b in BackendKind])
    parser.add_argument("--oracle", choices=[o.value for o in Oracle])
    parser.add_argument("--target", choices=[t.value for t in Target])
    parser.add_argument("--path-file", help="observation path CSV (time, Y_1, ...)")
    return parser


def overrides_from(args: argparse.Namespace) -> dict[str, Any]:
    """CLI flags as a nested override document; unset flags are left out."""
    return {
        "seed": args.seed,
        "y_seed": args.y_seed,
        "threads": args.threads,
        "k": args.k,
        "levels": args.levels,
        "backend": args.backend,
        "oracle": args.oracle,
        "target": args.target,
        "path_file": args.path_file,
        "time": {"T": args.time, "steps": args.steps},
        "model": {"preset": args.preset},
    }


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    subcommand = Subcommand(args.subcommand)
    check = VerifyCheck(args.check) if args.check else None
    if subcommand == Subcommand.VERIFY and check is None:
        logger.error("verify needs a check: " + ", ".join(c.value for c in VerifyCheck))
        return 2
    logger.info(f"Running {subcommand}" + (f" {check}" if check else ""))
    code, summary = run(subcommand, args.config, overrides_from(args), args.results_dir, check)
    sys.stdout.write(json.dumps(summary, indent=4, default=str) + "\n")
    return int(code)


if __name__ == "__main__":
    sys.exit(main())
