"""
Check Service
=============

Acceptance suites run by the `check` command, plus the CPU benchmark run
by `bench`.

Suites:
- reflection: unit length, mirror symmetry and involution of reflect()
- raster_oracle: tiled rasterizer vs per-pixel brute force
- tracer_oracle: BVH gather vs exhaustive gather, traced color vs reference
- hybrid_oracle: full hybrid render vs the end-to-end oracle
- gradients: full joint-phase loss vs central differences
- schedule: phase boundaries and frozen-group bit identity on a smoke run
- metrics: PSNR/SSIM identities and agreement with naive implementations
- acceptance: end-to-end ablation on moving_mirror; the hybrid pipeline must
  beat diffuse-only by PSNR_GAIN_DB and the normal losses must cut the
  mean normal angular error by NORMAL_ERROR_REDUCTION. Runs only when
  named with --suite

Every suite takes its sizes from CheckSizes; the defaults are the full
acceptance sizes, tests pass reduced ones.
"""

import math
import tempfile
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app.config import (
    DeformConfig,
    InitConfig,
    LossWeights,
    Phase,
    PhaseSchedule,
    RenderSettings,
    SceneKind,
    SyntheticSpec,
    TraceSettings,
    TrainConfig,
)
from app.core import autodiff as ad
from app.core.logging import get_logger
from app.core.utils import make_rng, random_quaternions, random_unit_vectors, stopwatch
from app.models.camera import Camera, Frame, look_at
from app.models.deformation import ENV, MAIN, DeformationField
from app.models.ray import Ray
from app.models.scene import Scene
from app.models.splat import SplatSet, sh_count
from app.services.ablation_service import run_ablation
from app.services.deform_service import deform_scene
from app.services.loss_service import total_loss
from app.services.metrics_service import PSNR_CAP, psnr, ssim_score
from app.services.raster_service import oracle_render, render
from app.services.render_service import blend, oracle_render_hybrid, reflection_rays, render_hybrid
from app.services.scene_service import load_dataset
from app.services.splat_service import quaternion_facing, reflect, rgb_to_sh_dc
from app.services.synthetic_service import generate_synthetic
from app.services.tracer_service import (
    brute_force_gather,
    brute_force_trace,
    build_bvh,
    gather_hits,
    inverse_affines,
    resolve_epsilon,
    trace_specular,
    validate_bvh,
)
from app.services.training_service import (
    AdamState,
    FrameData,
    effective_phase,
    group_of,
    initial_scene,
    load_frame_data,
    phase_boundaries,
    scene_parameters,
    scene_with_parameters,
    settings_for_dataset,
    trainable_groups,
    training_step,
)

logger = get_logger(__name__)

REFLECTION_TOLERANCE = 1e-12
RENDER_TOLERANCE = 1e-6
TRACE_TOLERANCE = 1e-9
GRADIENT_TOLERANCE = 1e-4
METRIC_TOLERANCE = 1e-9
PSNR_GAIN_DB = 2.0
NORMAL_ERROR_REDUCTION = 0.2


class CheckSizes(BaseModel):
    """Problem sizes of the acceptance suites."""

    seed: int = 0
    reflection_pairs: int = 100_000
    raster_scenes: int = 50
    raster_max_splats: int = 200
    resolution: int = 64
    tracer_scenes: int = 50
    tracer_rays: int = 1000
    tracer_max_env: int = 5000
    hybrid_scenes: int = 50
    hybrid_max_main: int = 60
    hybrid_max_env: int = 40
    grad_main: int = 50
    grad_env: int = 20
    grad_resolution: int = 32
    grad_entries: int = 3
    smoke_steps: int = 300
    metric_pairs: int = 100
    acceptance_frames: int = 32
    acceptance_resolution: int = 96
    acceptance_env: int = 200
    acceptance_steps: int = 6000


QUICK_SIZES = CheckSizes(
    reflection_pairs=1000,
    raster_scenes=2,
    raster_max_splats=20,
    resolution=16,
    tracer_scenes=2,
    tracer_rays=50,
    tracer_max_env=200,
    hybrid_scenes=2,
    hybrid_max_main=10,
    hybrid_max_env=8,
    grad_main=6,
    grad_env=4,
    grad_resolution=12,
    grad_entries=2,
    smoke_steps=6,
    metric_pairs=5,
    acceptance_frames=9,
    acceptance_resolution=16,
    acceptance_env=20,
    acceptance_steps=6,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# Random scenes
# ---------------------------------------------------------------------------

def random_camera(rng: np.random.Generator, width: int, height: int, radius: float = 3.5, fov_deg: float = 50.0) -> Camera:
    """Camera on a sphere around the origin looking at it, at a random time."""
    eye = radius * random_unit_vectors(rng, 1)[0]
    focal = 0.5 * width / math.tan(0.5 * math.radians(fov_deg))
    return Camera(
        fx=focal,
        fy=focal,
        cx=0.5 * width,
        cy=0.5 * height,
        width=width,
        height=height,
        world_to_camera=look_at(eye, np.zeros(3)),
        time=float(rng.uniform(0.0, 1.0)),
    )


def _sh(rng: np.random.Generator, n: int, degree: int, lo: float, hi: float) -> np.ndarray:
    # Small higher-order terms keep every SH color positive (the clamp stays inactive).
    sh = np.zeros((n, sh_count(degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(lo, hi, size=(n, 3)))
    sh[:, 1:, :] = rng.normal(0.0, 0.03, size=(n, sh_count(degree) - 1, 3))
    return sh


def random_main_splats(rng: np.random.Generator, n: int, sh_degree: int = 2, extent: float = 0.7) -> SplatSet:
    return SplatSet(
        center=rng.uniform(-extent, extent, size=(n, 3)),
        rotation=random_quaternions(rng, n),
        log_scale=np.log(rng.uniform(0.05, 0.25, size=(n, 2))),
        opacity_logit=rng.normal(1.0, 1.5, size=n),
        sh_coeffs=_sh(rng, n, sh_degree, 0.2, 0.8),
        tint_logit=rng.normal(0.0, 1.5, size=n),
    )


def random_env_sphere(rng: np.random.Generator, n: int, sh_degree: int = 2, radius: float = 3.0) -> SplatSet:
    """Environment splats scattered around a sphere, roughly facing its center."""
    dirs = random_unit_vectors(rng, n)
    return SplatSet(
        center=dirs * radius * rng.uniform(0.9, 1.1, size=(n, 1)),
        rotation=quaternion_facing(-dirs),
        log_scale=np.log(rng.uniform(0.3, 0.8, size=(n, 2))),
        opacity_logit=rng.normal(1.0, 1.0, size=n),
        sh_coeffs=_sh(rng, n, sh_degree, 0.1, 0.9),
    )


def random_env_cloud(rng: np.random.Generator, n: int, sh_degree: int = 0, extent: float = 3.0) -> SplatSet:
    """Environment splats with random positions and orientations in a box."""
    return SplatSet(
        center=rng.uniform(-extent, extent, size=(n, 3)),
        rotation=random_quaternions(rng, n),
        log_scale=np.log(rng.uniform(0.05, 0.5, size=(n, 2))),
        opacity_logit=rng.normal(0.0, 1.5, size=n),
        sh_coeffs=_sh(rng, n, sh_degree, 0.1, 0.9),
    )


def random_field(rng: np.random.Generator, kind: str, deform: DeformConfig, head_scale: float = 0.01) -> DeformationField:
    """Residual field with a small random output head (non-zero residuals)."""
    field = DeformationField.create(kind, deform.pos_freqs, deform.time_freqs, deform.hidden_layers, deform.hidden_width, rng)
    field.weights[-1] = rng.normal(0.0, head_scale, size=np.shape(field.weights[-1]))
    field.biases[-1] = rng.normal(0.0, head_scale, size=np.shape(field.biases[-1]))
    return field


SMALL_FIELD = DeformConfig(pos_freqs=2, time_freqs=2, hidden_layers=2, hidden_width=8)


def random_scene(rng: np.random.Generator, n_main: int, n_env: int, sh_degree: int = 2, deform: DeformConfig = SMALL_FIELD) -> Scene:
    return Scene(
        random_main_splats(rng, n_main, sh_degree),
        random_env_sphere(rng, n_env, sh_degree),
        random_field(rng, MAIN, deform),
        random_field(rng, ENV, deform),
    )


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def check_reflection(sizes: CheckSizes) -> CheckResult:
    rng = make_rng(sizes.seed)
    d_in = random_unit_vectors(rng, sizes.reflection_pairs)
    n = random_unit_vectors(rng, sizes.reflection_pairs)
    d_out = reflect(d_in, n)
    worst = {
        "unit": float(np.abs(np.linalg.norm(d_out, axis=1) - 1.0).max()),
        "mirror": float(np.abs(np.sum(d_out * n, axis=1) + np.sum(d_in * n, axis=1)).max()),
        "involution": float(np.abs(reflect(d_out, n) - d_in).max()),
    }
    passed = all(v < REFLECTION_TOLERANCE for v in worst.values())
    return CheckResult("reflection", passed, ", ".join(f"{k}={v:.2e}" for k, v in worst.items()))


def _buffer_difference(a, b) -> float:
    worst = 0.0
    for name in ("diffuse", "depth", "normal", "alpha_spec"):
        worst = max(worst, float(np.abs(np.asarray(getattr(a, name)) - np.asarray(getattr(b, name))).max()))
    return worst


def check_raster_oracle(sizes: CheckSizes) -> CheckResult:
    rng = make_rng(sizes.seed + 1)
    settings = RenderSettings()
    worst = 0.0
    for _ in range(sizes.raster_scenes):
        splats = random_main_splats(rng, int(rng.integers(1, sizes.raster_max_splats + 1)))
        camera = random_camera(rng, sizes.resolution, sizes.resolution)
        worst = max(worst, _buffer_difference(render(splats, camera, settings), oracle_render(splats, camera, settings)))
    return CheckResult("raster_oracle", worst < RENDER_TOLERANCE, f"max |render - oracle| = {worst:.2e} over {sizes.raster_scenes} scenes")


def check_tracer_oracle(sizes: CheckSizes) -> CheckResult:
    rng = make_rng(sizes.seed + 2)
    settings = TraceSettings()
    mismatched = 0
    bvh_problems = 0
    worst = 0.0
    for _ in range(sizes.tracer_scenes):
        env = random_env_cloud(rng, int(rng.integers(1, sizes.tracer_max_env + 1)))
        bvh = build_bvh(env, settings)
        bvh_problems += len(validate_bvh(bvh))
        origins = rng.uniform(-1.0, 1.0, size=(sizes.tracer_rays, 3))
        directions = random_unit_vectors(rng, sizes.tracer_rays)
        fast = gather_hits(bvh, origins, directions, settings)
        slow = brute_force_gather(env, origins, directions, settings)
        mismatched += int((fast.index != slow.index).any(axis=1).sum())
        colors = np.asarray(trace_specular(origins, directions, env, bvh, settings).color)
        inverse = inverse_affines(env)
        for o, d, c in zip(origins, directions, colors):
            reference = brute_force_trace(Ray(o, d), env, settings, inverse).color
            worst = max(worst, float(np.abs(c - reference).max()))
    passed = mismatched == 0 and bvh_problems == 0 and worst < TRACE_TOLERANCE
    detail = f"{mismatched} rays with differing hit lists, {bvh_problems} BVH problems, max color error {worst:.2e}"
    return CheckResult("tracer_oracle", passed, detail)


def check_hybrid_oracle(sizes: CheckSizes) -> CheckResult:
    rng = make_rng(sizes.seed + 3)
    settings = RenderSettings()
    worst = 0.0
    convexity = 0
    for _ in range(sizes.hybrid_scenes):
        scene = random_scene(rng, int(rng.integers(1, sizes.hybrid_max_main + 1)), int(rng.integers(1, sizes.hybrid_max_env + 1)))
        camera = random_camera(rng, sizes.resolution, sizes.resolution)
        trace = TraceSettings(k=scene.n_env)
        epsilon = resolve_epsilon(trace, scene.main, scene.env)
        frame = render_hybrid(scene, camera.time, camera, settings, trace, epsilon)
        reference = oracle_render_hybrid(scene, camera.time, camera, settings, trace, epsilon)
        image = np.asarray(frame.image)
        worst = max(worst, float(np.abs(image - reference).max()))
        lo = np.minimum(frame.buffers.diffuse, frame.specular) - 1e-12
        hi = np.maximum(frame.buffers.diffuse, frame.specular) + 1e-12
        outside = frame.traced[..., None] & ((image < lo) | (image > hi))
        convexity += int(outside.any(axis=-1).sum())
    passed = worst < RENDER_TOLERANCE and convexity == 0
    return CheckResult("hybrid_oracle", passed, f"max |hybrid - oracle| = {worst:.2e}, {convexity} non-convex pixels")


def gradient_problem(sizes: CheckSizes):
    """Joint-phase objective of a random scene as a function of its parameters."""
    rng = make_rng(sizes.seed + 4)
    scene = random_scene(rng, sizes.grad_main, sizes.grad_env)
    camera = random_camera(rng, sizes.grad_resolution, sizes.grad_resolution)
    shape = (camera.height, camera.width)
    gt = rng.uniform(0.0, 1.0, size=shape + (3,))
    external = (random_unit_vectors(rng, camera.pixel_count).reshape(shape + (3,)), np.ones(shape, dtype=bool))
    render_settings = RenderSettings()
    trace = TraceSettings(k=scene.n_env)
    epsilon = resolve_epsilon(trace, scene.main, scene.env)
    weights = LossWeights()

    def objective(params: Dict[str, "ad.ArrayLike"]) -> "ad.ArrayLike":
        current = scene_with_parameters(scene, params)
        frame = render_hybrid(current, camera.time, camera, render_settings, trace, epsilon)
        return total_loss(frame.buffers, gt, weights, Phase.JOINT, camera, frame.image, external).objective

    return objective, scene_parameters(scene)


def check_gradients(sizes: CheckSizes) -> CheckResult:
    objective, params = gradient_problem(sizes)
    report = ad.grad_check(
        objective, params, max_entries=sizes.grad_entries, rng=make_rng(sizes.seed), discontinuity_tolerance=1e-3
    )
    by_group: Dict[str, float] = {}
    for name, error in report.errors.items():
        group = group_of(name).value
        by_group[group] = max(by_group.get(group, 0.0), error)
    skipped = sum(report.skipped.values())
    detail = f"max relative error {report.max_relative_error:.2e} ({report.worst_parameter}); {skipped} entries on kinks skipped; " + ", ".join(
        f"{g}={e:.1e}" for g, e in sorted(by_group.items())
    )
    return CheckResult("gradients", report.passed(GRADIENT_TOLERANCE), detail)


def frozen_group_violations(steps: int, seed: int = 0) -> List[str]:
    """
    Train a tiny synthetic scene step by step and list every step at which
    a parameter outside the phase's trainable groups changed.
    """
    violations: List[str] = []
    with tempfile.TemporaryDirectory() as tmp:
        spec = SyntheticSpec(kind=SceneKind.MOVING_MIRROR, frames=2, width=16, height=16, env_count=20, plate_grid=3, seed=seed)
        manifest, _ = generate_synthetic(spec, tmp)
        dataset = load_dataset(manifest)
        config = TrainConfig(
            schedule=PhaseSchedule(total_steps=steps),
            deform=DeformConfig(pos_freqs=2, time_freqs=2, hidden_layers=1, hidden_width=8),
            init=InitConfig(env_count=20, env_radius=spec.env_radius, sh_degree=1),
            prune_interval=steps + 1,
            log_interval=max(steps, 1),
            seed=seed,
        )
        config = settings_for_dataset(config, dataset)
        scene = initial_scene(dataset, config)
        data = load_frame_data(dataset.frames)
        epsilon = resolve_epsilon(config.trace, scene.main, scene.env)
        state = AdamState()
        rng = make_rng(seed)
        for step in range(steps):
            phase = effective_phase(step, config)
            groups = trainable_groups(phase, config.tint_in_diffuse_phase, config.freeze_env_field)
            before = scene_parameters(scene)
            pick = int(rng.integers(len(data)))
            scene, _ = training_step(scene, data[pick], phase, state, config, epsilon, step, pick)
            after = scene_parameters(scene)
            for name, value in before.items():
                if group_of(name) not in groups and not np.array_equal(value, after[name]):
                    violations.append(f"step {step} ({phase.value}): {name}")
    return violations


def check_schedule(sizes: CheckSizes) -> CheckResult:
    boundaries = phase_boundaries(PhaseSchedule(total_steps=60000))
    violations = frozen_group_violations(sizes.smoke_steps, sizes.seed)
    passed = boundaries == (9000, 15000) and not violations
    detail = f"boundaries {boundaries}; {len(violations)} frozen-group changes in {sizes.smoke_steps} steps"
    if violations:
        detail += f" (first: {violations[0]})"
    return CheckResult("schedule", passed, detail)


def naive_psnr(a: np.ndarray, b: np.ndarray) -> float:
    values = np.asarray(a, dtype=np.float64).ravel().tolist()
    others = np.asarray(b, dtype=np.float64).ravel().tolist()
    mse = math.fsum((x - y) ** 2 for x, y in zip(values, others)) / len(values)
    return PSNR_CAP if mse == 0.0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def naive_ssim(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM by explicit shifted sums over a mirror-padded image."""
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    kernel = np.outer(g, g)
    r = size // 2
    h, w = a.shape[:2]

    def blur(x):
        padded = np.pad(x, ((r, r), (r, r), (0, 0)), mode="symmetric")
        out = np.zeros_like(x)
        for dy in range(size):
            for dx in range(size):
                out += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
        return out

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu1, mu2 = blur(a), blur(b)
    s11 = blur(a * a) - mu1 * mu1
    s22 = blur(b * b) - mu2 * mu2
    s12 = blur(a * b) - mu1 * mu2
    value = ((2 * mu1 * mu2 + c1) * (2 * s12 + c2)) / ((mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2))
    return float(value.mean())


def check_metrics(sizes: CheckSizes) -> CheckResult:
    rng = make_rng(sizes.seed + 5)
    identity_ok = True
    worst = 0.0
    for _ in range(sizes.metric_pairs):
        a = rng.uniform(0.0, 1.0, size=(24, 24, 3))
        b = np.clip(a + rng.normal(0.0, rng.uniform(0.01, 0.3), size=a.shape), 0.0, 1.0)
        identity_ok &= psnr(a, a) == PSNR_CAP and ssim_score(a, a) == 1.0
        worst = max(worst, abs(psnr(a, b) - naive_psnr(a, b)), abs(ssim_score(a, b) - naive_ssim(a, b)))
    passed = identity_ok and worst < METRIC_TOLERANCE
    return CheckResult("metrics", passed, f"identities {'hold' if identity_ok else 'FAIL'}; max deviation from naive {worst:.2e}")


ACCEPTANCE_VARIANTS = ("full", "diffuse_only", "no_normal_losses")


def acceptance_verdict(table: pd.DataFrame) -> Tuple[bool, str]:
    """
    Judge an ablation table holding the ACCEPTANCE_VARIANTS rows.

    The specular benefit is the PSNR gap between full and diffuse_only; the
    normal-loss benefit is the relative drop of mean normal angular error
    from no_normal_losses to full. Non-finite errors fail.
    """
    rows = table.set_index("variant")
    gain = float(rows.at["full", "psnr"] - rows.at["diffuse_only", "psnr"])
    with_normals = float(rows.at["full", "normal_error_deg"])
    without = float(rows.at["no_normal_losses", "normal_error_deg"])
    if np.isfinite(with_normals) and np.isfinite(without) and without > 0.0:
        reduction = (without - with_normals) / without
    else:
        reduction = float("nan")
    specular_ok = gain >= PSNR_GAIN_DB
    normals_ok = bool(np.isfinite(reduction) and reduction >= NORMAL_ERROR_REDUCTION)
    detail = (
        f"specular {'ok' if specular_ok else 'FAIL'}: full - diffuse_only = {gain:+.2f} dB (need >= {PSNR_GAIN_DB:.1f}); "
        f"normals {'ok' if normals_ok else 'FAIL'}: {without:.2f} -> {with_normals:.2f} deg, "
        f"{100.0 * reduction:.1f}% lower (need >= {100.0 * NORMAL_ERROR_REDUCTION:.0f}%)"
    )
    return specular_ok and normals_ok, detail


def acceptance_config(sizes: CheckSizes, env_radius: float) -> TrainConfig:
    steps = sizes.acceptance_steps
    return TrainConfig(
        schedule=PhaseSchedule(total_steps=steps),
        deform=DeformConfig(pos_freqs=6, time_freqs=4, hidden_layers=2, hidden_width=32),
        init=InitConfig(env_count=sizes.acceptance_env, env_radius=env_radius, sh_degree=2),
        prune_interval=max(steps // 12, 1),
        checkpoint_interval=steps + 1,
        log_interval=max(steps // 60, 1),
        seed=sizes.seed,
    )


def check_acceptance(sizes: CheckSizes) -> CheckResult:
    spec = SyntheticSpec(
        kind=SceneKind.MOVING_MIRROR,
        frames=sizes.acceptance_frames,
        width=sizes.acceptance_resolution,
        height=sizes.acceptance_resolution,
        env_count=sizes.acceptance_env,
        seed=sizes.seed,
    )
    with tempfile.TemporaryDirectory() as tmp:
        manifest, _ = generate_synthetic(spec, f"{tmp}/dataset")
        table = run_ablation(manifest, acceptance_config(sizes, spec.env_radius), f"{tmp}/ablation", ACCEPTANCE_VARIANTS)
    passed, detail = acceptance_verdict(table)
    return CheckResult("acceptance", passed, f"{sizes.acceptance_steps} steps; {detail}")


SUITES: Dict[str, Callable[[CheckSizes], CheckResult]] = {
    "reflection": check_reflection,
    "raster_oracle": check_raster_oracle,
    "tracer_oracle": check_tracer_oracle,
    "hybrid_oracle": check_hybrid_oracle,
    "gradients": check_gradients,
    "schedule": check_schedule,
    "metrics": check_metrics,
    "acceptance": check_acceptance,
}

DEFAULT_SUITES = [name for name in SUITES if name != "acceptance"]


def run_checks(sizes: Optional[CheckSizes] = None, names: Optional[List[str]] = None) -> List[CheckResult]:
    """Run the named suites (DEFAULT_SUITES when none are named) and time each."""
    sizes = sizes or CheckSizes()
    results = []
    for name in names or DEFAULT_SUITES:
        started = time.perf_counter()
        result = SUITES[name](sizes)
        result.seconds = time.perf_counter() - started
        level = logger.info if result.passed else logger.error
        level(f"check {name}: {'PASS' if result.passed else 'FAIL'} ({result.seconds:.1f}s) {result.detail}")
        results.append(result)
    return results


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

class BenchSizes(BaseModel):
    n_main: int = 2000
    n_env: int = 1000
    resolution: int = 64
    repeats: int = 3
    seed: int = 0


def run_benchmark(sizes: Optional[BenchSizes] = None) -> pd.DataFrame:
    """
    Median wall time (ms) of each pipeline stage on a random scene, with
    frames per second of the full hybrid render. CPU timings only.
    """
    sizes = sizes or BenchSizes()
    rng = make_rng(sizes.seed)
    scene = random_scene(rng, sizes.n_main, sizes.n_env, deform=DeformConfig())
    camera = random_camera(rng, sizes.resolution, sizes.resolution)
    render_settings, trace = RenderSettings(), TraceSettings()
    epsilon = resolve_epsilon(trace, scene.main, scene.env)
    config = TrainConfig(render=render_settings, trace=trace)
    gt = rng.uniform(0.0, 1.0, size=(camera.height, camera.width, 3))
    data = FrameData(Frame(camera=camera), gt)
    stages: Dict[str, List[float]] = {}

    def timed(stage: str):
        return stopwatch(stages.setdefault(stage, []))

    for _ in range(sizes.repeats):
        with timed("deform"):
            main, env = deform_scene(scene, camera.time)
        with timed("rasterize"):
            buffers = render(main, camera, render_settings)
        with timed("bvh_build"):
            bvh = build_bvh(env, trace)
        traced = buffers.mask(render_settings.alpha_mask_threshold)
        ids = np.flatnonzero(traced.ravel())
        origins, directions = reflection_rays(camera, buffers.depth, buffers.normal, ids, epsilon)
        with timed("trace"):
            result = trace_specular(origins, directions, env, bvh, trace, t_min=epsilon)
        with timed("blend"):
            blend(np.asarray(buffers.diffuse).reshape(-1, 3)[ids], result.color, np.asarray(buffers.alpha_spec).ravel()[ids])
        with timed("hybrid_frame"):
            render_hybrid(scene, camera.time, camera, render_settings, trace, epsilon)
        with timed("train_step"):
            training_step(scene, data, Phase.JOINT, AdamState(), config, epsilon)

    table = pd.DataFrame(
        [{"stage": stage, "ms": float(np.median(times))} for stage, times in stages.items()], columns=["stage", "ms"]
    )
    logger.info(f"Hybrid frame {frames_per_second(table):.2f} frames/s at {sizes.resolution}x{sizes.resolution}")
    return table


def frames_per_second(table: pd.DataFrame) -> float:
    frame_ms = float(table.loc[table["stage"] == "hybrid_frame", "ms"].iloc[0])
    return 1000.0 / frame_ms if frame_ms > 0.0 else float("inf")
