"""
Training Service
================

Coarse-to-fine optimization of a canonical scene against a dataset.

Features:
- Phase schedule (diffuse-only, specular-only, joint) at exact step boundaries
- Parameter groups; only trainable groups are put on the tape, so frozen
  arrays are never touched
- Adam with bias correction and per-parameter step counts
- Quaternion renormalization after every update
- Opacity pruning that keeps optimizer state rows aligned
- Periodic scene checkpoints and a CSV training log (pandas)
"""

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config import Phase, PhaseSchedule, RenderSettings, TraceSettings, TrainConfig
from app.core import autodiff as ad
from app.core.exceptions import TrainingDivergedError
from app.core.logging import get_logger
from app.core.utils import make_rng
from app.models.camera import Dataset, Frame
from app.models.deformation import DeformationField
from app.models.scene import Scene
from app.models.splat import SplatSet
from app.services.deform_service import deform_splats
from app.services.image_service import load_image, load_normal_map
from app.services.loss_service import LossReport, total_loss
from app.services.raster_service import render
from app.services.render_service import render_hybrid
from app.services.scene_service import init_scene, load_scene, save_scene
from app.services.tracer_service import resolve_epsilon

logger = get_logger(__name__)

LOG_COLUMNS = [
    "step", "phase", "total", "photometric", "ssim_term", "l_norm", "l_tcnorm", "n_main", "n_env", "wall_ms",
]
SPLAT_FIELDS = ("center", "rotation", "log_scale", "opacity_logit", "sh_coeffs", "tint_logit")
QUATERNION_PARAMETERS = ("main.rotation", "env.rotation")


# ---------------------------------------------------------------------------
# Schedule and groups
# ---------------------------------------------------------------------------

def phase_boundaries(schedule: PhaseSchedule) -> Tuple[int, int]:
    """First step of the specular phase and first step of the joint phase."""
    total = schedule.total_steps
    diffuse_end = math.ceil(Fraction(str(schedule.diffuse_end)) * total)
    specular_end = math.ceil(Fraction(str(schedule.specular_end)) * total)
    return diffuse_end, specular_end


def phase_of(step: int, schedule: PhaseSchedule) -> Phase:
    diffuse_end, specular_end = phase_boundaries(schedule)
    if step < diffuse_end:
        return Phase.DIFFUSE
    if step < specular_end:
        return Phase.SPECULAR
    return Phase.JOINT


class ParamGroup(str, Enum):
    MAIN_POSITION = "main_position"
    MAIN_ROTATION = "main_rotation"
    MAIN_SCALE = "main_scale"
    MAIN_OPACITY = "main_opacity"
    MAIN_SH = "main_sh"
    MAIN_TINT = "main_tint"
    ENV_SPLATS = "env_splats"
    FIELD_MAIN = "field_main"
    FIELD_ENV = "field_env"


_MAIN_GEOMETRY = frozenset(
    {
        ParamGroup.MAIN_POSITION,
        ParamGroup.MAIN_ROTATION,
        ParamGroup.MAIN_SCALE,
        ParamGroup.MAIN_OPACITY,
        ParamGroup.MAIN_SH,
        ParamGroup.FIELD_MAIN,
    }
)


def trainable_groups(phase: Phase, tint_in_diffuse_phase: bool = False, freeze_env_field: bool = False) -> FrozenSet[ParamGroup]:
    """
    Diffuse: main splats except tint, plus the main field.
    Specular: environment splats, the environment field and the tint.
    Joint: everything.
    """
    if phase == Phase.DIFFUSE:
        groups = set(_MAIN_GEOMETRY)
        if tint_in_diffuse_phase:
            groups.add(ParamGroup.MAIN_TINT)
    elif phase == Phase.SPECULAR:
        groups = {ParamGroup.ENV_SPLATS, ParamGroup.FIELD_ENV, ParamGroup.MAIN_TINT}
    else:
        groups = set(ParamGroup)
    if freeze_env_field:
        groups.discard(ParamGroup.FIELD_ENV)
    return frozenset(groups)


_MAIN_FIELD_GROUPS = {
    "center": ParamGroup.MAIN_POSITION,
    "rotation": ParamGroup.MAIN_ROTATION,
    "log_scale": ParamGroup.MAIN_SCALE,
    "opacity_logit": ParamGroup.MAIN_OPACITY,
    "sh_coeffs": ParamGroup.MAIN_SH,
    "tint_logit": ParamGroup.MAIN_TINT,
}


def group_of(name: str) -> ParamGroup:
    """Group of a parameter name such as 'main.center' or 'field.env.w2'."""
    kind, rest = name.split(".", 1)
    if kind == "main":
        return _MAIN_FIELD_GROUPS[rest]
    if kind == "env":
        return ParamGroup.ENV_SPLATS
    return ParamGroup.FIELD_MAIN if rest.startswith("main.") else ParamGroup.FIELD_ENV


def learning_rate(name: str, config: TrainConfig) -> float:
    rates = config.rates
    return {
        ParamGroup.MAIN_POSITION: rates.position,
        ParamGroup.MAIN_ROTATION: rates.rotation,
        ParamGroup.MAIN_SCALE: rates.scale,
        ParamGroup.MAIN_OPACITY: rates.opacity,
        ParamGroup.MAIN_SH: rates.sh,
        ParamGroup.MAIN_TINT: rates.tint,
        ParamGroup.ENV_SPLATS: rates.env_splats,
        ParamGroup.FIELD_MAIN: rates.field_weights,
        ParamGroup.FIELD_ENV: rates.field_weights,
    }[group_of(name)]


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

def scene_parameters(scene: Scene) -> Dict[str, np.ndarray]:
    """Every trainable array of the scene by name."""
    base = scene.detached()
    params: Dict[str, np.ndarray] = {}
    for prefix, splats in (("main", base.main), ("env", base.env)):
        for name in SPLAT_FIELDS:
            value = getattr(splats, name)
            if value is not None:
                params[f"{prefix}.{name}"] = value
    for prefix, field_ in (("field.main", base.main_field), ("field.env", base.env_field)):
        for i, (w, b) in enumerate(zip(field_.weights, field_.biases)):
            params[f"{prefix}.w{i}"] = w
            params[f"{prefix}.b{i}"] = b
    return params


def scene_with_parameters(scene: Scene, values: Dict[str, "ad.ArrayLike"]) -> Scene:
    """Copy of `scene` with the named arrays replaced (Vars allowed)."""

    def splats(prefix: str, current: SplatSet) -> SplatSet:
        changes = {name: values[f"{prefix}.{name}"] for name in SPLAT_FIELDS if f"{prefix}.{name}" in values}
        return current.with_fields(**changes) if changes else current

    def field_(prefix: str, current: DeformationField) -> DeformationField:
        weights = [values.get(f"{prefix}.w{i}", w) for i, w in enumerate(current.weights)]
        biases = [values.get(f"{prefix}.b{i}", b) for i, b in enumerate(current.biases)]
        return DeformationField(current.kind, current.pos_freqs, current.time_freqs, weights, biases)

    return Scene(
        main=splats("main", scene.main),
        env=splats("env", scene.env),
        main_field=field_("field.main", scene.main_field),
        env_field=field_("field.env", scene.env_field),
    )


def bind(scene: Scene, tape: ad.Tape, groups: FrozenSet[ParamGroup]) -> Scene:
    """Register the trainable groups' arrays on `tape`; frozen arrays stay plain."""
    taped = {
        name: tape.parameter(name, value)
        for name, value in scene_parameters(scene).items()
        if group_of(name) in groups and np.size(value) > 0
    }
    return scene_with_parameters(scene, taped)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moments and step counts per parameter name."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)

    def drop_rows(self, prefix: str, keep: np.ndarray) -> None:
        for store in (self.m, self.v):
            for name in list(store):
                if name.startswith(prefix + "."):
                    store[name] = store[name][keep]


def optimizer_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    rates: Dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-15,
) -> Dict[str, np.ndarray]:
    """
    Adam update of the parameters that have a gradient.

    Parameters without an entry in `grads` are returned as the same
    objects. Quaternion rows that moved are renormalized.
    """
    updated = dict(params)
    for name, grad in grads.items():
        value = params[name]
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        step = state.steps.get(name, 0) + 1
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        delta = rates[name] * m_hat / (np.sqrt(v_hat) + eps)
        new = value - delta
        if name in QUATERNION_PARAMETERS and new.size:
            moved = (delta != 0.0).any(axis=1)
            norms = np.linalg.norm(new, axis=1)
            fix = moved & (norms >= 1e-9)
            new[fix] = new[fix] / norms[fix, None]
            new[~fix] = value[~fix]
        state.m[name], state.v[name], state.steps[name] = m, v, step
        updated[name] = new
    return updated


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

def _prune_mask(splats: SplatSet, threshold: float, min_count: int) -> np.ndarray:
    opacity = np.asarray(splats.detached().opacity)
    keep = opacity >= threshold
    if keep.sum() < min(min_count, splats.count):
        ranked = np.lexsort((np.arange(splats.count), -opacity))
        keep = np.zeros(splats.count, dtype=bool)
        keep[ranked[:min_count]] = True
    return keep


def prune(scene: Scene, threshold: float, min_count: int = 1, state: Optional[AdamState] = None) -> Scene:
    """
    Remove splats whose canonical opacity is below `threshold`, never going
    below `min_count` per set (the most opaque survive).
    """
    sets = {}
    for prefix, splats in (("main", scene.main), ("env", scene.env)):
        keep = _prune_mask(splats, threshold, min_count)
        if keep.all():
            sets[prefix] = splats
            continue
        logger.info(f"Pruned {int((~keep).sum())} {prefix} splats below opacity {threshold}")
        sets[prefix] = splats.subset(keep)
        if state is not None:
            state.drop_rows(prefix, keep)
    return Scene(sets["main"], sets["env"], scene.main_field, scene.env_field)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class FrameData:
    frame: Frame
    image: np.ndarray
    normals: Optional[Tuple[np.ndarray, np.ndarray]] = None


def load_frame_data(frames: Sequence[Frame]) -> List[FrameData]:
    data = []
    for f in frames:
        shape = (f.camera.height, f.camera.width)
        normals = load_normal_map(f.normal_path, shape) if f.normal_path is not None else None
        data.append(FrameData(f, load_image(f.image_path, shape), normals))
    return data


def effective_phase(step: int, config: TrainConfig) -> Phase:
    if not config.specular_enabled:
        return Phase.DIFFUSE
    if not config.coarse_to_fine:
        return Phase.JOINT
    return phase_of(step, config.schedule)


def training_step(
    scene: Scene,
    data: FrameData,
    phase: Phase,
    state: AdamState,
    config: TrainConfig,
    epsilon: float,
    step: int = 0,
    frame_id: int = 0,
) -> Tuple[Scene, LossReport]:
    """
    One forward/backward/update on a single frame.

    Raises:
        TrainingDivergedError: a loss term is not finite (nothing is updated)
    """
    groups = trainable_groups(phase, config.tint_in_diffuse_phase, config.freeze_env_field)
    tape = ad.Tape()
    bound = bind(scene, tape, groups)
    camera = data.frame.camera

    if phase == Phase.DIFFUSE:
        main = deform_splats(bound.main, bound.main_field, camera.time)
        buffers = render(main, camera, config.render)
        hybrid = None
    else:
        frame = render_hybrid(bound, camera.time, camera, config.render, config.trace, epsilon)
        buffers, hybrid = frame.buffers, frame.image

    report = total_loss(buffers, data.image, config.loss, phase, camera, hybrid, data.normals)
    bad = report.first_non_finite()
    if bad is not None:
        raise TrainingDivergedError(step, frame_id, bad)
    grads = ad.backward(tape, report.objective)
    if grads and not any(np.any(g != 0.0) for g in grads.values()):
        logger.warning(f"Step {step} [{phase.value}]: every trainable gradient is zero, nothing moves")
    params = scene_parameters(scene)
    rates = {name: learning_rate(name, config) for name in grads}
    updated = optimizer_step(params, grads, state, rates, config.beta1, config.beta2, config.adam_eps)
    return scene_with_parameters(scene, {name: updated[name] for name in grads}), report


def settings_for_dataset(config: TrainConfig, dataset: Dataset) -> TrainConfig:
    """
    Fill what the config leaves open from the dataset manifest: the
    background color and the reflection-ray offset the ground truth used.
    """
    render_update = {"background": tuple(dataset.background), **dataset.render_settings}
    trace_update = {}
    if config.trace.epsilon is None and dataset.trace_settings.get("epsilon") is not None:
        trace_update["epsilon"] = float(dataset.trace_settings["epsilon"])
    return config.copy(
        update={
            "render": RenderSettings(**{**config.render.dict(), **render_update}),
            "trace": TraceSettings(**{**config.trace.dict(), **trace_update}),
        }
    )


def initial_scene(dataset: Dataset, config: TrainConfig) -> Scene:
    """Fresh scene from the dataset point cloud, or the dataset scene file."""
    if config.init_from_points and dataset.points_path is not None:
        cloud = np.load(dataset.points_path)
        logger.info(f"Initializing from {len(cloud)} points in {dataset.points_path}")
        return init_scene(cloud[:, :3], cloud[:, 3:6], config.init, config.deform, make_rng(config.seed))
    return load_scene(dataset.scene_path)


@dataclass
class TrainResult:
    scene: Scene
    history: pd.DataFrame
    log_path: Optional[Path] = None
    checkpoints: List[Path] = field(default_factory=list)


def train(
    dataset: Dataset,
    scene: Scene,
    config: TrainConfig,
    frame_ids: Optional[Sequence[int]] = None,
    output_dir: Optional[Path] = None,
) -> TrainResult:
    """
    Run `config.schedule.total_steps` optimization steps.

    Each step samples a frame with the seeded generator, renders at its
    time, evaluates the phase-gated loss and updates the trainable groups.
    Pruning and checkpoints follow their intervals; the final scene, the
    checkpoints and the CSV log are written under `output_dir` when given.

    Raises:
        TrainingDivergedError: a loss term became non-finite
    """
    rng = make_rng(config.seed)
    frame_ids = list(range(len(dataset.frames))) if frame_ids is None else list(frame_ids)
    data = load_frame_data([dataset.frames[i] for i in frame_ids])
    epsilon = resolve_epsilon(config.trace, scene.main, scene.env) if scene.n_env else 1.0
    state = AdamState()
    rows = []
    checkpoints: List[Path] = []
    total = config.schedule.total_steps
    output_dir = Path(output_dir) if output_dir is not None else None
    logger.info(f"Training {total} steps on {len(data)} frames ({scene.n_main} main / {scene.n_env} env splats)")

    previous: Optional[Phase] = None
    for step in range(total):
        phase = effective_phase(step, config)
        if phase != previous:
            logger.info(f"Step {step}: entering {phase.value} phase")
            previous = phase
        pick = int(rng.integers(len(data)))
        start = time.perf_counter()
        scene, report = training_step(scene, data[pick], phase, state, config, epsilon, step, frame_ids[pick])

        if (step + 1) % config.prune_interval == 0:
            scene = prune(scene, config.prune_threshold, config.prune_min_count, state)
        wall_ms = (time.perf_counter() - start) * 1000.0
        rows.append(
            {"step": step, "phase": phase.value, **report.terms(), "n_main": scene.n_main, "n_env": scene.n_env, "wall_ms": wall_ms}
        )
        if step % config.log_interval == 0:
            logger.info(
                f"step {step} [{phase.value}] total={report.total:.6f} l1={report.photometric:.6f} "
                f"ssim={report.ssim_term:.6f} norm={report.l_norm:.6f} tc={report.l_tcnorm:.6f}"
            )
        if output_dir is not None and (step + 1) % config.checkpoint_interval == 0:
            path = output_dir / "checkpoints" / f"step_{step + 1:06d}.json"
            save_scene(scene, path)
            checkpoints.append(path)

    history = pd.DataFrame(rows, columns=LOG_COLUMNS)
    log_path = None
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        log_path = output_dir / "train_log.csv"
        history.to_csv(log_path, index=False)
        save_scene(scene, output_dir / "final_scene.json")
        logger.info(f"Training finished; log written to {log_path}")
    return TrainResult(scene=scene, history=history, log_path=log_path, checkpoints=checkpoints)
