"""`bench`: per-stage CPU timings of the rendering and training pipeline."""

import argparse

from app.core.logging import get_logger
from app.services.check_service import BenchSizes, frames_per_second, run_benchmark

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("bench", help="time each pipeline stage on a random scene")
    defaults = BenchSizes()
    parser.add_argument("--main", type=int, default=defaults.n_main, help="main splat count")
    parser.add_argument("--env", type=int, default=defaults.n_env, help="environment splat count")
    parser.add_argument("--resolution", type=int, default=defaults.resolution)
    parser.add_argument("--repeats", type=int, default=defaults.repeats)
    parser.add_argument("--csv", help="write the (stage, ms) table to this file")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    sizes = BenchSizes(n_main=args.main, n_env=args.env, resolution=args.resolution, repeats=args.repeats)
    table = run_benchmark(sizes)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    print(f"frames/s (hybrid, CPU): {frames_per_second(table):.2f}")
    if args.csv:
        table.to_csv(args.csv, index=False)
    return 0
