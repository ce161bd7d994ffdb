"""
SpecSplat - Command Line Entry Point
====================================

Dynamic specular Gaussian splatting on the CPU: synthetic data, training,
rendering, evaluation and the acceptance checks.

Commands:
- synth   <spec.json> <out_dir>                 generate a synthetic dataset
- train   <config.json>                         train a scene
- render  <scene> <cameras> <out_dir> [--buffers]
- eval    <renders> <gt>                        PSNR / SSIM table and JSON
- check                                         acceptance suites, pass/fail
- bench                                         per-stage CPU timings
- ablate  <config.json>                         ablation variants

Domain failures (SplatError) and missing files are logged and turned into
exit code 1; usage errors exit with code 2.
"""

import argparse
import sys
from typing import List, Optional

from app.commands import ablate, bench, check, evaluate, render, synth, train
from app.config import settings
from app.core.exceptions import SplatError
from app.core.logging import configure_logging, get_logger

logger = get_logger(__name__)

COMMANDS = (synth, train, render, evaluate, check, bench, ablate)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specsplat",
        description=f"{settings.APP_NAME} {settings.VERSION}: dynamic specular Gaussian splatting",
    )
    parser.add_argument(
        "--log-level", type=str.upper, choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], help="override LOG_LEVEL"
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    configure_logging(
        log_level=args.log_level or settings.LOG_LEVEL,
        log_file=settings.LOG_FILE,
        enable_file=settings.LOG_TO_FILE,
    )
    logger.debug(f"Running '{args.command}' ({settings.ENVIRONMENT}, {settings.WORKERS} workers)")

    try:
        return args.handler(args)
    except SplatError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except (FileNotFoundError, NotADirectoryError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
