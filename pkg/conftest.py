"""
Shared pytest fixtures: seeded generators, small cameras and scenes.
"""

import numpy as np
import pytest

from app.config import SceneKind, SyntheticSpec
from app.core.utils import make_rng
from app.models.camera import Camera, look_at
from app.services.check_service import random_env_sphere, random_main_splats, random_scene
from app.services.synthetic_service import generate_synthetic


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def camera() -> Camera:
    """24x20 camera on the +z side of the origin looking at it."""
    width, height = 24, 20
    focal = 0.5 * width / np.tan(np.radians(25.0))
    return Camera(
        fx=focal,
        fy=focal,
        cx=0.5 * width,
        cy=0.5 * height,
        width=width,
        height=height,
        world_to_camera=look_at(np.array([0.4, -0.3, 3.0]), np.zeros(3)),
        time=0.25,
    )


@pytest.fixture
def main_splats(rng):
    return random_main_splats(rng, 12, sh_degree=2)


@pytest.fixture
def env_splats(rng):
    return random_env_sphere(rng, 10, sh_degree=2)


@pytest.fixture
def scene(rng):
    return random_scene(rng, 10, 8)


@pytest.fixture(scope="session")
def tiny_spec() -> SyntheticSpec:
    """Synthetic dataset small enough for a few training steps in a test."""
    return SyntheticSpec(kind=SceneKind.MOVING_MIRROR, frames=2, width=16, height=16, env_count=20, plate_grid=3, seed=7)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_spec):
    """Manifest path of the tiny synthetic dataset, generated once per session. Do not modify it."""
    manifest, _ = generate_synthetic(tiny_spec, tmp_path_factory.mktemp("tiny_dataset"))
    return manifest
