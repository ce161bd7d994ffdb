"""`check`: run the acceptance suites and print pass/fail per suite."""

import argparse

from app.core.logging import get_logger
from app.services.check_service import QUICK_SIZES, SUITES, CheckSizes, run_checks

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("check", help="run oracle-equivalence, gradient and schedule suites (acceptance only when named)")
    parser.add_argument("--suite", action="append", choices=sorted(SUITES), help="run only this suite (repeatable)")
    parser.add_argument("--quick", action="store_true", help="reduced problem sizes")
    parser.add_argument("--seed", type=int, default=0)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    sizes = (QUICK_SIZES if args.quick else CheckSizes()).copy(update={"seed": args.seed})
    results = run_checks(sizes, args.suite)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<14} {r.seconds:8.1f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0
