"""
Configuration Management for SpecSplat
======================================

This module handles environment settings and every tunable record of the
rendering and training pipeline.

Key Features:
- Process settings loaded from environment variables / `.env`
- Typed, validated render, trace, loss, schedule and optimizer records
- Training configuration files loaded from JSON
- Environment-specific settings (production overrides)
"""

import json
import math
import os
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, BaseSettings, Field, ValidationError, validator
import logging

from app.core.exceptions import ConfigError

logger = logging.getLogger(__name__)

_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


class Settings(BaseSettings):
    """
    Process settings loaded from environment variables.

    Optional Environment Variables:
    - ENVIRONMENT: deployment environment (development/production)
    - LOG_LEVEL / LOG_FILE: logging configuration
    - WORKERS: worker threads used for tile rendering
    - OUTPUT_DIR: default directory for renders, logs and checkpoints
    """

    APP_NAME: str = "SpecSplat"
    VERSION: str = "1.0.0"
    ENVIRONMENT: str = "development"
    DEBUG: bool = True

    # Logging Configuration
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = "specsplat.log"
    LOG_TO_FILE: bool = False

    # Execution
    WORKERS: int = 1
    OUTPUT_DIR: str = "runs"

    @validator("LOG_LEVEL")
    def validate_log_level(cls, v):
        """Reject unknown logging levels."""
        level = v.upper()
        if level not in _LOG_LEVELS:
            raise ValueError(f"LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}")
        return level

    @validator("WORKERS")
    def validate_workers(cls, v):
        if v < 1:
            raise ValueError("WORKERS must be >= 1")
        return v

    class Config:
        """
        Pydantic configuration for environment variable loading.
        """
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = True


class ProductionSettings(Settings):
    """Long-running training boxes: quieter console, file log on."""
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"
    LOG_TO_FILE: bool = True


def get_environment_settings() -> Settings:
    """
    Get environment-specific settings based on ENVIRONMENT variable.

    Returns:
        Settings: Environment-specific settings instance
    """
    env = os.getenv("ENVIRONMENT", "development").lower()

    if env == "production":
        return ProductionSettings()
    return Settings()


settings = get_environment_settings()


def get_settings() -> Settings:
    """Return the global settings instance."""
    return settings


# ---------------------------------------------------------------------------
# Pipeline records
# ---------------------------------------------------------------------------

Rgb = Tuple[float, float, float]


def _open_unit(name: str, v: float) -> float:
    if not 0.0 < v < 1.0:
        raise ValueError(f"{name} must lie in (0, 1)")
    return v


class RenderSettings(BaseModel):
    """Rasterizer knobs shared by every render of the main content."""

    gaussian_cutoff: float = math.exp(-4.5)
    early_stop: float = 1e-4
    alpha_mask_threshold: float = 0.5
    background: Rgb = (0.0, 0.0, 0.0)
    tile_size: int = 16
    flip_normals: bool = False
    near: float = 1e-2
    far: float = 1e4

    @validator("gaussian_cutoff", "early_stop", "alpha_mask_threshold")
    def validate_thresholds(cls, v, field):
        return _open_unit(field.name, v)

    @validator("tile_size")
    def validate_tile_size(cls, v):
        if v < 1:
            raise ValueError("tile_size must be >= 1")
        return v

    @validator("background")
    def validate_background(cls, v):
        if any(c < 0.0 or c > 1.0 for c in v):
            raise ValueError("background must lie in [0,1]^3")
        return v

    @validator("far")
    def validate_far(cls, v, values):
        if v <= values.get("near", 0.0):
            raise ValueError("far must exceed near")
        return v

    @property
    def cutoff_radius(self) -> float:
        """Local radius (in scale units) beyond which the kernel drops below the cutoff."""
        return math.sqrt(-2.0 * math.log(self.gaussian_cutoff))

    class Config:
        allow_mutation = False


class TraceSettings(BaseModel):
    """Reflection-ray tracing against the environment splats."""

    k: int = 16
    gaussian_cutoff: float = math.exp(-4.5)
    early_stop: float = 1e-4
    epsilon: Optional[float] = None
    epsilon_fraction: float = 1e-3
    miss_color: Rgb = (0.0, 0.0, 0.0)
    leaf_size: int = 4

    @validator("k", "leaf_size")
    def validate_positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator("gaussian_cutoff", "early_stop")
    def validate_thresholds(cls, v, field):
        return _open_unit(field.name, v)

    @validator("epsilon")
    def validate_epsilon(cls, v):
        if v is not None and v <= 0.0:
            raise ValueError("epsilon must be > 0")
        return v

    @property
    def cutoff_radius(self) -> float:
        return math.sqrt(-2.0 * math.log(self.gaussian_cutoff))

    class Config:
        allow_mutation = False


class LossWeights(BaseModel):
    """Weights of the auxiliary loss terms (photometric L1 has weight 1)."""

    lambda_ssim: float = 0.2
    lambda_norm: float = 0.05
    lambda_tcnorm: float = 0.05
    normal_mask_threshold: float = 0.5

    @validator("lambda_ssim", "lambda_norm", "lambda_tcnorm")
    def validate_non_negative(cls, v, field):
        if v < 0.0:
            raise ValueError(f"{field.name} must be >= 0")
        return v


class Phase(str, Enum):
    """Coarse-to-fine training phases."""
    DIFFUSE = "diffuse"
    SPECULAR = "specular"
    JOINT = "joint"


class PhaseSchedule(BaseModel):
    """Coarse-to-fine boundaries as fractions of the total step count."""

    total_steps: int = 60000
    diffuse_end: float = 0.15
    specular_end: float = 0.25

    @validator("total_steps")
    def validate_total(cls, v):
        if v < 0:
            raise ValueError("total_steps must be >= 0")
        return v

    @validator("specular_end")
    def validate_order(cls, v, values):
        lo = values.get("diffuse_end")
        if lo is None or not 0.0 < lo < v < 1.0:
            raise ValueError("require 0 < diffuse_end < specular_end < 1")
        return v


class LearningRates(BaseModel):
    """Per-group constant learning rates."""

    position: float = 1e-3
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    sh: float = 2.5e-3
    tint: float = 1e-2
    env_splats: float = 2.5e-3
    field_weights: float = 5e-4

    @validator("*")
    def validate_rate(cls, v, field):
        if v <= 0.0:
            raise ValueError(f"learning rate '{field.name}' must be > 0")
        return v


class DeformConfig(BaseModel):
    """Residual network architecture."""

    pos_freqs: int = 6
    time_freqs: int = 4
    hidden_layers: int = 4
    hidden_width: int = 64

    @validator("pos_freqs", "time_freqs")
    def validate_freqs(cls, v, field):
        if v < 0:
            raise ValueError(f"{field.name} must be >= 0")
        return v

    @validator("hidden_layers", "hidden_width")
    def validate_layout(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v


class InitConfig(BaseModel):
    """Point-cloud initialization of a fresh scene."""

    default_scale: float = 0.05
    initial_opacity: float = 0.1
    initial_tint: float = 0.1
    sh_degree: int = 2
    env_count: int = 200
    env_radius: Optional[float] = None
    env_radius_factor: float = 2.0
    env_from_points: bool = False

    @validator("default_scale")
    def validate_scale(cls, v):
        if v <= 0.0:
            raise ValueError("default_scale must be > 0")
        return v

    @validator("initial_opacity", "initial_tint")
    def validate_probability(cls, v, field):
        return _open_unit(field.name, v)

    @validator("sh_degree")
    def validate_degree(cls, v):
        if not 0 <= v <= 2:
            raise ValueError("sh_degree must be 0, 1 or 2")
        return v


class TrainConfig(BaseModel):
    """Everything one training run needs."""

    dataset: Optional[str] = None
    output_dir: str = "runs/train"
    schedule: PhaseSchedule = Field(default_factory=PhaseSchedule)
    rates: LearningRates = Field(default_factory=LearningRates)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    prune_threshold: float = 0.005
    prune_interval: int = 1000
    prune_min_count: int = 1
    checkpoint_interval: int = 5000
    log_interval: int = 100
    seed: int = 0
    loss: LossWeights = Field(default_factory=LossWeights)
    render: RenderSettings = Field(default_factory=RenderSettings)
    trace: TraceSettings = Field(default_factory=TraceSettings)
    deform: DeformConfig = Field(default_factory=DeformConfig)
    init: InitConfig = Field(default_factory=InitConfig)
    specular_enabled: bool = True
    coarse_to_fine: bool = True
    tint_in_diffuse_phase: bool = False
    freeze_env_field: bool = False
    init_from_points: bool = True

    @validator("beta1", "beta2")
    def validate_beta(cls, v, field):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"{field.name} must lie in [0, 1)")
        return v

    @validator("adam_eps")
    def validate_eps(cls, v):
        if v <= 0.0:
            raise ValueError("adam_eps must be > 0")
        return v

    @validator("prune_interval", "checkpoint_interval", "log_interval")
    def validate_interval(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator("prune_threshold")
    def validate_prune_threshold(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("prune_threshold must lie in [0, 1)")
        return v


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    """
    Load and validate a training configuration file.

    Relative dataset / output paths are resolved against the file's directory.

    Raises:
        ConfigError: unreadable JSON or invalid values
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        config = TrainConfig.parse_obj(raw)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read training config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid training config {path}: {e}") from e

    base = path.parent
    changes = {}
    if config.dataset and not Path(config.dataset).is_absolute():
        changes["dataset"] = str(base / config.dataset)
    if not Path(config.output_dir).is_absolute():
        changes["output_dir"] = str(base / config.output_dir)
    logger.info(f"Training config loaded from {path}")
    return config.copy(update=changes)


class SceneKind(str, Enum):
    MOVING_MIRROR = "moving_mirror"
    SPINNING_PLATE = "spinning_plate"
    DIFFUSE_ONLY = "diffuse_only"


class OrbitSpec(BaseModel):
    """Camera orbit around the scene origin."""

    radius: float = 3.5
    elevation_deg: float = 55.0
    arc_deg: float = 60.0
    fov_deg: float = 50.0

    @validator("radius", "fov_deg")
    def validate_positive(cls, v, field):
        if v <= 0.0:
            raise ValueError(f"{field.name} must be > 0")
        return v


class SyntheticSpec(BaseModel):
    """Description of a generated dataset."""

    kind: SceneKind = SceneKind.MOVING_MIRROR
    frames: int = 32
    width: int = 96
    height: int = 96
    orbit: OrbitSpec = Field(default_factory=OrbitSpec)
    env_count: int = 200
    env_radius: float = 4.0
    plate_grid: int = 8
    seed: int = 0

    @validator("frames")
    def validate_frames(cls, v):
        if v < 2:
            raise ValueError("frames must be >= 2")
        return v

    @validator("width", "height")
    def validate_resolution(cls, v, field):
        if v < 16:
            raise ValueError(f"{field.name} must be >= 16")
        return v

    @validator("env_count")
    def validate_env_count(cls, v):
        if not 1 <= v <= 5000:
            raise ValueError("env_count must lie in [1, 5000]")
        return v

    @validator("plate_grid")
    def validate_grid(cls, v):
        if v < 1:
            raise ValueError("plate_grid must be >= 1")
        return v


def load_synthetic_spec(path: Union[str, Path]) -> SyntheticSpec:
    """Load a SyntheticSpec JSON file."""
    try:
        return SyntheticSpec.parse_file(str(path))
    except (OSError, ValueError) as e:
        raise ConfigError(f"invalid synthetic spec {path}: {e}") from e
