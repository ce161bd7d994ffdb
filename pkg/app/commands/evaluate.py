"""`eval <renders> <gt>`: PSNR / SSIM of renders against ground truth."""

import argparse
from pathlib import Path

from app.core.logging import get_logger
from app.services.metrics_service import evaluate_directories, format_report

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="compare rendered images with ground truth")
    parser.add_argument("renders", help="directory of rendered images")
    parser.add_argument("gt", help="directory of ground-truth images")
    parser.add_argument("--json", dest="json_path", help="also write the report JSON to this file")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    report = evaluate_directories(args.renders, args.gt)
    text = report.json(indent=2)
    print(format_report(report))
    print(text)
    if args.json_path:
        Path(args.json_path).write_text(text + "\n", encoding="utf-8")
    return 0
