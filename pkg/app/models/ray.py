"""
Ray models
==========

Single rays and ray/splat hits used by the per-splat geometry API and the
brute-force oracles.
"""

from dataclasses import dataclass

import numpy as np

from app.core.exceptions import SceneValidationError

UNIT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Ray:
    """Origin, unit direction and the admissible depth interval."""

    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        if abs(np.linalg.norm(self.direction) - 1.0) > UNIT_TOLERANCE:
            raise SceneValidationError("ray", None, "direction", "direction must be unit length")
        if self.t_min < 0.0 or not self.t_max > self.t_min:
            raise SceneValidationError("ray", None, "t_min/t_max", "require 0 <= t_min < t_max")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class SplatHit:
    """Intersection of a ray with one splat's tangent plane."""

    index: int
    u: float
    v: float
    depth: float
    weight: float
    world_point: np.ndarray

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])
