"""`ablate <config.json>`: train pipeline variants and compare held-out quality."""

import argparse
from pathlib import Path

from app.config import load_train_config
from app.core.exceptions import ConfigError
from app.core.logging import get_logger
from app.services.ablation_service import VARIANTS, run_ablation

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("ablate", help="run the ablation variants on one dataset")
    parser.add_argument("config", help="base training config JSON file")
    parser.add_argument("--dataset", help="dataset directory (overrides the config)")
    parser.add_argument("--output", help="output directory (default: <config output_dir>/ablation)")
    parser.add_argument("--variant", action="append", choices=list(VARIANTS), help="run only this variant (repeatable)")
    parser.add_argument("--steps", type=int, help="total steps per variant")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_train_config(args.config)
    if args.steps is not None:
        config = config.copy(update={"schedule": config.schedule.copy(update={"total_steps": args.steps})})
    dataset = args.dataset or config.dataset
    if not dataset:
        raise ConfigError("no dataset given (config 'dataset' or --dataset)")
    output = Path(args.output) if args.output else Path(config.output_dir) / "ablation"
    table = run_ablation(dataset, config, output, args.variant)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0
