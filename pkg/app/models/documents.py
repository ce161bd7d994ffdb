"""
File document schemas
=====================

Pydantic models for every JSON file the package reads or writes: scene
documents, camera lists, dataset manifests and evaluation reports.
"""

from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, validator

SCENE_FORMAT_VERSION = 1


class SceneHeader(BaseModel):
    """Counts and layout declared at the top of a scene file."""
    version: int = SCENE_FORMAT_VERSION
    n_main: int
    n_env: int
    sh_degree: int

    @validator("version")
    def validate_version(cls, v):
        if v != SCENE_FORMAT_VERSION:
            raise ValueError(f"unsupported scene format version {v}")
        return v

    @validator("n_main", "n_env")
    def validate_count(cls, v, field):
        if v < 0:
            raise ValueError(f"{field.name} must be >= 0")
        return v

    @validator("sh_degree")
    def validate_degree(cls, v):
        if not 0 <= v <= 2:
            raise ValueError("sh_degree must be 0, 1 or 2")
        return v


class SplatRecord(BaseModel):
    """One splat; `tint_logit` is present for main splats only."""
    center: List[float] = Field(..., min_items=3, max_items=3)
    rotation: List[float] = Field(..., min_items=4, max_items=4)
    log_scale: List[float] = Field(..., min_items=2, max_items=2)
    opacity_logit: float
    sh_coeffs: List[List[float]]
    tint_logit: Optional[float] = None

    @validator("sh_coeffs")
    def validate_sh(cls, v):
        if any(len(row) != 3 for row in v):
            raise ValueError("each SH coefficient row must have 3 channels")
        return v


class BlobRecord(BaseModel):
    """Little-endian float64 array, base64 encoded, with its declared shape."""
    shape: List[int]
    data: str


class FieldRecord(BaseModel):
    """Residual network weights."""
    kind: str
    pos_freqs: int
    time_freqs: int
    weights: List[BlobRecord]
    biases: List[BlobRecord]


class SceneDocument(BaseModel):
    header: SceneHeader
    main: List[SplatRecord]
    env: List[SplatRecord]
    deformation: Dict[str, FieldRecord]


class CameraRecord(BaseModel):
    """One entry of a camera file."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: List[List[float]]
    time: float
    image: Optional[str] = None
    normal_map: Optional[str] = None

    @validator("fx", "fy")
    def validate_focal(cls, v, field):
        if v <= 0.0:
            raise ValueError(f"{field.name} must be > 0")
        return v

    @validator("time")
    def validate_time(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("time must lie in [0, 1]")
        return v

    @validator("world_to_camera")
    def validate_matrix(cls, v):
        if len(v) != 4 or any(len(row) != 4 for row in v):
            raise ValueError("world_to_camera must be 4x4 row-major")
        return v


class DatasetManifest(BaseModel):
    """Top-level description of a dataset directory."""
    cameras: str = "cameras.json"
    scene: str = "init_scene.json"
    points: Optional[str] = None
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    render: Dict[str, object] = Field(default_factory=dict)
    trace: Dict[str, object] = Field(default_factory=dict)


class FrameMetrics(BaseModel):
    name: str
    psnr: float
    ssim: float
    ms: float = 0.0


class EvalReport(BaseModel):
    """Per-frame and mean image metrics."""
    frames: List[FrameMetrics]
    mean_psnr: float
    mean_ssim: float
    ms_per_frame: float

    @validator("mean_ssim")
    def validate_ssim(cls, v):
        if not -1.0 <= v <= 1.0:
            raise ValueError("SSIM must lie in [-1, 1]")
        return v
