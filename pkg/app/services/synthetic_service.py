"""
Synthetic Dataset Service
=========================

Analytic desk-scale scenes with exact ground truth.

Scene kinds:
- moving_mirror: a high-tint plate whose orientation oscillates over time
- spinning_plate: a half-tinted checker plate turning about its normal
- diffuse_only: a static checker plate with every tint logit at -10

Every kind is surrounded by colored environment splats on a sphere facing
inward. Ground-truth frames and exact normal maps are rendered with the
brute-force oracle; the per-frame ground-truth scenes (identity residual
fields) are written under `reference/` next to the dataset.

Layout of the output directory:

    dataset.json  cameras.json  init_scene.json  points.npy
    images/frame_000.pfm ...  normals/frame_000.pfm ...  reference/frame_000.json ...
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from app.config import DeformConfig, InitConfig, RenderSettings, SceneKind, SyntheticSpec, TraceSettings
from app.core.logging import get_logger
from app.core.utils import make_rng
from app.models.camera import Camera, Frame, look_at
from app.models.deformation import ENV, MAIN, DeformationField
from app.models.documents import DatasetManifest
from app.models.scene import Scene
from app.models.splat import SplatSet
from app.services.deform_service import deform_scene
from app.services.image_service import save_image
from app.services.raster_service import oracle_render
from app.services.render_service import oracle_render_hybrid
from app.services.scene_service import init_env_sphere, init_scene, save_cameras, save_manifest, save_scene
from app.services.splat_service import quaternion_about_axis, quaternion_multiply, rgb_to_sh_dc
from app.services.tracer_service import resolve_epsilon

logger = get_logger(__name__)

PathLike = Union[str, Path]

PLATE_HALF_SIZE = 0.6
PLATE_OPACITY_LOGIT = 4.0
ENV_OPACITY = 0.95
MIRROR_AMPLITUDE = np.radians(15.0)
SPIN_TURNS = 0.25
POINT_JITTER = 0.25

TINT_LOGITS = {
    SceneKind.MOVING_MIRROR: 4.0,
    SceneKind.SPINNING_PLATE: 0.0,
    SceneKind.DIFFUSE_ONLY: -10.0,
}


@dataclass
class Plate:
    """Canonical plate geometry and colors at rest."""

    centers: np.ndarray  # (N, 3)
    colors: np.ndarray   # (N, 3)
    spacing: float


def build_plate(kind: SceneKind, grid: int) -> Plate:
    """grid x grid splat centers covering the square plate in the z = 0 plane."""
    spacing = 2.0 * PLATE_HALF_SIZE / grid
    ticks = -PLATE_HALF_SIZE + spacing * (np.arange(grid) + 0.5)
    xs, ys = np.meshgrid(ticks, ticks, indexing="xy")
    centers = np.stack([xs.ravel(), ys.ravel(), np.zeros(grid * grid)], axis=1)
    if kind == SceneKind.MOVING_MIRROR:
        colors = np.full((grid * grid, 3), 0.05)
    else:
        ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="xy")
        light = ((ii + jj) % 2 == 0).ravel()
        colors = np.where(light[:, None], [0.85, 0.8, 0.7], [0.15, 0.2, 0.35])
    return Plate(centers=centers, colors=np.asarray(colors, dtype=np.float64), spacing=spacing)


def plate_pose(kind: SceneKind, t: float) -> np.ndarray:
    """Quaternion applied to the whole plate at time t."""
    if kind == SceneKind.MOVING_MIRROR:
        return quaternion_about_axis(np.array([1.0, 0.0, 0.0]), MIRROR_AMPLITUDE * np.sin(2.0 * np.pi * t))
    if kind == SceneKind.SPINNING_PLATE:
        return quaternion_about_axis(np.array([0.0, 0.0, 1.0]), 2.0 * np.pi * SPIN_TURNS * t)
    return np.array([1.0, 0.0, 0.0, 0.0])


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def plate_splats(plate: Plate, kind: SceneKind, t: float) -> SplatSet:
    """Main splats of the plate posed at time t (SH degree 0)."""
    n = len(plate.centers)
    q = plate_pose(kind, t)
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = rgb_to_sh_dc(plate.colors)
    return SplatSet(
        center=plate.centers @ rotation_matrix(q).T,
        rotation=quaternion_multiply(q, np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))),
        log_scale=np.full((n, 2), np.log(0.6 * plate.spacing)),
        opacity_logit=np.full(n, PLATE_OPACITY_LOGIT),
        sh_coeffs=sh,
        tint_logit=np.full(n, TINT_LOGITS[kind]),
    )


def environment_splats(spec: SyntheticSpec, rng: np.random.Generator) -> SplatSet:
    colors = rng.uniform(0.05, 1.0, size=(spec.env_count, 3))
    config = InitConfig(initial_opacity=ENV_OPACITY, sh_degree=0)
    return init_env_sphere(spec.env_count, np.zeros(3), spec.env_radius, rng, config, colors)


def identity_scene(main: SplatSet, env: SplatSet) -> Scene:
    """Scene whose residual fields are minimal networks with a zero head."""
    return Scene(
        main,
        env,
        DeformationField.create(MAIN, 0, 0, 1, 1),
        DeformationField.create(ENV, 0, 0, 1, 1),
    )


def orbit_cameras(spec: SyntheticSpec) -> List[Camera]:
    """One camera per frame along the orbit arc, frame i at t = i / (frames - 1)."""
    orbit = spec.orbit
    focal = 0.5 * spec.width / np.tan(0.5 * np.radians(orbit.fov_deg))
    elevation = np.radians(orbit.elevation_deg)
    cameras = []
    for i in range(spec.frames):
        t = i / (spec.frames - 1)
        azimuth = np.radians(-0.5 * orbit.arc_deg + orbit.arc_deg * t)
        eye = orbit.radius * np.array(
            [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
        )
        cameras.append(
            Camera(
                fx=focal,
                fy=focal,
                cx=0.5 * spec.width,
                cy=0.5 * spec.height,
                width=spec.width,
                height=spec.height,
                world_to_camera=look_at(eye, np.zeros(3)),
                time=t,
            )
        )
    return cameras


def exact_normals(scene: Scene, camera: Camera, settings: RenderSettings) -> np.ndarray:
    """Plate normals where the plate covers the pixel, zero elsewhere."""
    main, _ = deform_scene(scene, camera.time)
    buffers = oracle_render(main, camera, settings)
    covered = buffers.mask(settings.alpha_mask_threshold)
    return np.where(covered[..., None], buffers.normal, 0.0)


def initial_points(plate: Plate, rng: np.random.Generator) -> np.ndarray:
    """(N, 6) jittered plate points with colors, the starting cloud for training."""
    jitter = rng.normal(0.0, POINT_JITTER * plate.spacing, size=plate.centers.shape)
    jitter[:, 2] = 0.0
    return np.concatenate([plate.centers + jitter, plate.colors], axis=1)


def generate_synthetic(spec: SyntheticSpec, out_dir: PathLike) -> Tuple[Path, List[Frame]]:
    """
    Render a synthetic dataset into `out_dir` and return its manifest path
    and frames. Output bytes depend only on `spec` (seed included).
    """
    out = Path(out_dir)
    rng = make_rng(spec.seed)
    render_settings = RenderSettings()
    trace_settings = TraceSettings(k=spec.env_count)

    plate = build_plate(spec.kind, spec.plate_grid)
    env = environment_splats(spec, rng)
    cameras = orbit_cameras(spec)
    epsilon = resolve_epsilon(trace_settings, plate_splats(plate, spec.kind, 0.0), env)

    frames = []
    for i, camera in enumerate(cameras):
        name = f"frame_{i:03d}"
        reference = identity_scene(plate_splats(plate, spec.kind, camera.time), env)
        image = oracle_render_hybrid(reference, camera.time, camera, render_settings, trace_settings, epsilon)
        normals = exact_normals(reference, camera, render_settings)

        image_path = out / "images" / f"{name}.pfm"
        normal_path = out / "normals" / f"{name}.pfm"
        save_image(image, image_path)
        save_image(normals, normal_path)
        save_scene(reference, out / "reference" / f"{name}.json")
        frames.append(Frame(camera=camera, image_path=image_path, normal_path=normal_path))
        logger.debug(f"Rendered {name} at t={camera.time:.3f}")

    points = initial_points(plate, rng)
    init = InitConfig(env_count=spec.env_count, env_radius=spec.env_radius)
    scene = init_scene(points[:, :3], points[:, 3:], init, DeformConfig(), rng)
    save_scene(scene, out / "init_scene.json")
    np.save(out / "points.npy", points)
    save_cameras(frames, out / "cameras.json")
    manifest = DatasetManifest(
        cameras="cameras.json",
        scene="init_scene.json",
        points="points.npy",
        background=render_settings.background,
        trace={"epsilon": epsilon},
    )
    path = save_manifest(manifest, out)
    logger.info(f"Generated {spec.kind.value} dataset with {spec.frames} frames in {out}")
    return path, frames
