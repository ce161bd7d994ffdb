"""
Ablation Service
================

Train one dataset under named variants of the pipeline and compare the
held-out quality of each.

Variants:
- full: the configured pipeline
- diffuse_only: specular branch disabled
- no_normal_losses: both normal terms weighted 0
- no_coarse_to_fine: every step trains all groups jointly
- static_environment: environment residual field frozen

Results are written as ablation.csv and ablation.json in the output
directory, one row per variant.
"""

import json
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.config import TrainConfig
from app.core.exceptions import ConfigError
from app.core.logging import get_logger
from app.models.camera import Dataset, Frame
from app.models.scene import Scene
from app.services.image_service import load_image, load_normal_map
from app.services.metrics_service import mean_angular_error, psnr, split_frames, ssim_score
from app.services.render_service import render_hybrid
from app.services.scene_service import load_dataset
from app.services.training_service import initial_scene, settings_for_dataset, train

logger = get_logger(__name__)

PathLike = Union[str, Path]

ABLATION_COLUMNS = ["variant", "psnr", "ssim", "normal_error_deg", "train_frames", "test_frames", "steps"]


def _loss_without_normals(config: TrainConfig) -> TrainConfig:
    return config.copy(update={"loss": config.loss.copy(update={"lambda_norm": 0.0, "lambda_tcnorm": 0.0})})


VARIANTS: Dict[str, Callable[[TrainConfig], TrainConfig]] = {
    "full": lambda c: c,
    "diffuse_only": lambda c: c.copy(update={"specular_enabled": False}),
    "no_normal_losses": _loss_without_normals,
    "no_coarse_to_fine": lambda c: c.copy(update={"coarse_to_fine": False}),
    "static_environment": lambda c: c.copy(update={"freeze_env_field": True}),
}


def variant_config(name: str, base: TrainConfig) -> TrainConfig:
    """
    Raises:
        ConfigError: unknown variant name
    """
    if name not in VARIANTS:
        raise ConfigError(f"unknown ablation variant '{name}' (known: {', '.join(VARIANTS)})")
    return VARIANTS[name](base)


def evaluate_held_out(scene: Scene, frames: Sequence[Frame], config: TrainConfig) -> Dict[str, float]:
    """Mean PSNR, SSIM and normal angular error over the given frames."""
    rows = []
    for frame in frames:
        camera = frame.camera
        rendered = render_hybrid(
            scene, camera.time, camera, config.render, config.trace, specular=config.specular_enabled
        )
        image = np.asarray(rendered.image)
        gt = load_image(frame.image_path, image.shape[:2])
        error = float("nan")
        if frame.normal_path is not None:
            normals, valid = load_normal_map(frame.normal_path, image.shape[:2])
            covered = rendered.buffers.mask(config.render.alpha_mask_threshold)
            error = mean_angular_error(np.asarray(rendered.buffers.normal), normals, valid & covered)
        rows.append({"psnr": psnr(image, gt), "ssim": ssim_score(image, gt), "normal_error_deg": error})
    table = pd.DataFrame(rows, columns=["psnr", "ssim", "normal_error_deg"])
    return {name: float(table[name].mean()) for name in table.columns}


def run_ablation(
    dataset_path: PathLike,
    base: TrainConfig,
    output_dir: PathLike,
    variants: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """
    Train every variant from the same initial scene on the training split
    and evaluate it on the held-out split (every 8th frame).
    """
    variants = list(variants or VARIANTS)
    configs = {name: variant_config(name, base) for name in variants}
    output_dir = Path(output_dir)
    dataset: Dataset = load_dataset(dataset_path)
    train_ids, test_ids = split_frames(len(dataset.frames))
    test_frames = [dataset.frames[i] for i in test_ids]

    rows: List[dict] = []
    for name, config in configs.items():
        config = settings_for_dataset(config, dataset)
        logger.info(f"Ablation variant '{name}': {config.schedule.total_steps} steps")
        result = train(dataset, initial_scene(dataset, config), config, train_ids, output_dir / name)
        scores = evaluate_held_out(result.scene, test_frames, config)
        rows.append(
            {
                "variant": name,
                **scores,
                "train_frames": len(train_ids),
                "test_frames": len(test_ids),
                "steps": config.schedule.total_steps,
            }
        )
        logger.info(f"Variant '{name}': PSNR {scores['psnr']:.2f} dB, SSIM {scores['ssim']:.4f}")

    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    output_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(output_dir / "ablation.csv", index=False)
    (output_dir / "ablation.json").write_text(
        json.dumps(table.to_dict(orient="records"), indent=2) + "\n", encoding="utf-8"
    )
    return table
