"""
`render <scene> <cameras> <out_dir> [--buffers]`: render every camera of a camera file.

Background and trace offset come from the dataset manifest (--dataset, or a
dataset.json beside the camera file) so renders match the ground truth.
"""

import argparse
import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from app.config import TrainConfig, load_train_config
from app.core.logging import get_logger
from app.services.image_service import save_image
from app.services.metrics_service import TIMINGS_FILE
from app.services.render_service import render_hybrid
from app.services.scene_service import MANIFEST_FILE, load_cameras, load_dataset, load_scene
from app.services.tracer_service import resolve_epsilon
from app.services.training_service import settings_for_dataset

logger = get_logger(__name__)

BUFFERS = ("diffuse", "depth", "normal", "alpha_spec")


def register(subparsers) -> None:
    parser = subparsers.add_parser("render", help="render a scene for every camera")
    parser.add_argument("scene", help="scene JSON file")
    parser.add_argument("cameras", help="camera JSON file")
    parser.add_argument("out_dir", help="directory for the rendered images")
    parser.add_argument("--buffers", action="store_true", help="also write diffuse/depth/normal/alpha_spec/specular PFMs")
    parser.add_argument("--config", help="training config whose render/trace settings to use")
    parser.add_argument("--dataset", help="dataset whose background and trace offset to use (default: manifest beside the cameras)")
    parser.add_argument("--format", choices=("pfm", "ppm"), default="pfm", help="image format of the final renders")
    parser.add_argument("--no-specular", action="store_true", help="write the diffuse image only")
    parser.set_defaults(handler=run)


def dataset_beside(cameras: str) -> Optional[Path]:
    manifest = Path(cameras).parent / MANIFEST_FILE
    return manifest if manifest.exists() else None


def run(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene)
    frames = load_cameras(args.cameras)
    config = load_train_config(args.config) if args.config else TrainConfig()
    dataset_path = args.dataset or dataset_beside(args.cameras)
    if dataset_path is not None:
        config = settings_for_dataset(config, load_dataset(dataset_path, check_images=False))
        logger.info(f"Render settings from dataset {dataset_path}: background {config.render.background}")
    render_settings, trace_settings = config.render, config.trace
    epsilon = resolve_epsilon(trace_settings, scene.main, scene.env) if scene.n_env else 1.0
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    timings = {}
    for i, frame in enumerate(frames):
        camera = frame.camera
        name = frame.image_path.stem if frame.image_path is not None else f"frame_{i:03d}"
        started = time.perf_counter()
        result = render_hybrid(
            scene, camera.time, camera, render_settings, trace_settings, epsilon, specular=not args.no_specular
        )
        timings[name] = (time.perf_counter() - started) * 1000.0
        save_image(np.asarray(result.image), out / f"{name}.{args.format}")
        if args.buffers:
            buffers = result.buffers.numpy()
            for buffer in BUFFERS:
                save_image(getattr(buffers, buffer), out / "buffers" / f"{name}_{buffer}.pfm")
            save_image(result.specular, out / "buffers" / f"{name}_specular.pfm")
        logger.info(f"Rendered {name} in {timings[name]:.1f} ms")

    (out / TIMINGS_FILE).write_text(json.dumps(timings, indent=2) + "\n", encoding="utf-8")
    print(f"rendered {len(frames)} frames into {out}")
    return 0
