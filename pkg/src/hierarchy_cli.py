"""
Command-line entry point.

Usage::

    python -m src.hierarchy_cli <subcommand> --config <path> [--out <dir>] [--verbose]

Subcommands: derive, run, oracle, compare, observe. Exit codes: 0 success,
2 configuration or model error, 3 numerical failure, 4 oracle cutoff failure.
The QBBGKY_THREADS environment variable sets the worker count.
"""

import argparse
import logging
import sys
from typing import Optional, Sequence

from hierarchy_config.constants import ExitCode
from src.HierarchyErrors import HierarchyError
from src.HierarchyManager import HierarchyManager, exit_code_for
from src.RunConfig import load_config

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    "derive": "compile contraction programs and write their coupling structure",
    "run": "integrate the closed hierarchy and write trajectory, conservation and observables",
    "oracle": "evolve the exact truncated-Fock-space reference and write its reduced density matrices",
    "compare": "run hierarchy and oracle on shared sample times and write error tables",
    "observe": "recompute observable tables from a written trajectory",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbbgky", description="Reduced-density-matrix hierarchy simulator")
    parser.add_argument("--verbose", "-v", action="store_true", help="log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="run configuration JSON")
        sub.add_argument("--out", default=None, help="output directory (overrides output_dir in the config)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        manager = HierarchyManager(config, args.out)
        report = getattr(manager, args.command)()
    except HierarchyError as exc:
        code = exit_code_for(exc)
        logger.error("%s failed: %s", args.command, exc)
        return code.value

    for key, value in sorted(report.details.items()):
        logger.info("%s: %s", key, value)
    logger.info("%s finished, %d files in %s", args.command, len(report.files), report.output_dir)
    return ExitCode.SUCCESS.value


if __name__ == "__main__":
    sys.exit(main())
