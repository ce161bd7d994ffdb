"""
Camera and dataset models
=========================

Pinhole cameras with a world-to-camera rigid transform (x right, y down,
z forward) and a normalized timestamp, plus the on-disk dataset layout.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from app.core.exceptions import SceneValidationError

ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Camera:
    """Intrinsics, resolution, pose and time of one view."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        pose = np.asarray(self.world_to_camera, dtype=np.float64)
        object.__setattr__(self, "world_to_camera", pose)
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise SceneValidationError("camera", None, "fx/fy", "focal lengths must be positive")
        if not 0.0 <= self.time <= 1.0:
            raise SceneValidationError("camera", None, "time", f"{self.time} outside [0, 1]")
        if self.width < 0 or self.height < 0:
            raise SceneValidationError("camera", None, "resolution", "negative size")
        if pose.shape != (4, 4) or not np.isfinite(pose).all():
            raise SceneValidationError("camera", None, "world_to_camera", "expected a finite 4x4 matrix")
        r = pose[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHONORMAL_TOLERANCE:
            raise SceneValidationError("camera", None, "world_to_camera", "rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def origin(self) -> np.ndarray:
        """Camera center in world space."""
        return -self.rotation.T @ self.translation

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    def ray_directions(self, xs: Optional[np.ndarray] = None, ys: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Unit world-space directions through pixel centers.

        Without arguments returns an (H, W, 3) grid; with integer pixel
        coordinates returns one direction per coordinate pair.
        """
        if xs is None or ys is None:
            ys, xs = np.mgrid[0:self.height, 0:self.width]
        cam = np.stack(
            [
                (xs + 0.5 - self.cx) / self.fx,
                (ys + 0.5 - self.cy) / self.fy,
                np.ones(np.shape(xs)),
            ],
            axis=-1,
        )
        world = cam @ self.rotation
        return world / np.linalg.norm(world, axis=-1, keepdims=True)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (continuous) and camera-space z of world points."""
        p = self.to_camera(points)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)
        return px, z

    def with_time(self, time: float) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.world_to_camera, time)


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> np.ndarray:
    """World-to-camera matrix for a camera at `eye` looking at `target` (y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    pose = np.eye(4)
    pose[:3, :3] = r
    pose[:3, 3] = -r @ eye
    return pose


@dataclass(frozen=True)
class Frame:
    """One supervised view: camera, ground-truth image and optional external normal map."""

    camera: Camera
    image_path: Optional[Path] = None
    normal_path: Optional[Path] = None


@dataclass
class Dataset:
    """Ordered frames, the canonical scene file and the background color."""

    frames: List[Frame]
    scene_path: Path
    points_path: Optional[Path] = None
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    render_settings: dict = field(default_factory=dict)
    trace_settings: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)
