"""`train <config.json>`: optimize a scene against a dataset."""

import argparse
from pathlib import Path

from app.config import load_train_config
from app.core.exceptions import ConfigError
from app.core.logging import get_logger, run_log
from app.services.metrics_service import split_frames
from app.services.scene_service import load_dataset
from app.services.training_service import initial_scene, settings_for_dataset, train

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train a scene on a dataset")
    parser.add_argument("config", help="training config JSON file")
    parser.add_argument("--dataset", help="dataset directory (overrides the config)")
    parser.add_argument("--output", help="output directory (overrides the config)")
    parser.add_argument("--steps", type=int, help="total steps (overrides the schedule)")
    parser.add_argument("--holdout", action="store_true", help="train on the training split only (every 8th frame held out)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_train_config(args.config)
    if args.steps is not None:
        config = config.copy(update={"schedule": config.schedule.copy(update={"total_steps": args.steps})})
    dataset_path = args.dataset or config.dataset
    if not dataset_path:
        raise ConfigError("no dataset given (config 'dataset' or --dataset)")
    output = Path(args.output or config.output_dir)

    dataset = load_dataset(dataset_path)
    config = settings_for_dataset(config, dataset)
    frame_ids = split_frames(len(dataset.frames))[0] if args.holdout else None
    with run_log(output) as log_path:
        logger.info(f"Training on {dataset_path} with {len(frame_ids or dataset.frames)} frames, log in {log_path}")
        result = train(dataset, initial_scene(dataset, config), config, frame_ids, output)
    last = result.history.iloc[-1] if len(result.history) else None
    if last is not None:
        print(f"final loss {last['total']:.6f} after {len(result.history)} steps; scene in {output / 'final_scene.json'}")
    return 0
