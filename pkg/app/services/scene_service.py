"""
Scene Service
=============

Scene documents, camera files, dataset manifests and point-cloud
initialization.

Features:
- Deterministic JSON scene files (save -> load -> save is byte-identical)
- Residual field weights stored as base64 little-endian float64 blobs
- Parse errors carry line/column; validation errors name kind, index and field
- Main splats from a point cloud (3-NN scale), environment splats on a
  sphere prior or from the same points
- Dataset loading with existence and resolution checks
"""

import base64
import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError
from scipy.spatial import cKDTree

from app.config import DeformConfig, InitConfig
from app.core import autodiff as ad
from app.core.exceptions import SceneParseError, SceneValidationError
from app.core.logging import get_logger
from app.core.utils import logit
from app.models.camera import Camera, Dataset, Frame
from app.models.deformation import ENV, MAIN, DeformationField
from app.models.documents import (
    BlobRecord,
    CameraRecord,
    DatasetManifest,
    FieldRecord,
    SceneDocument,
    SceneHeader,
    SplatRecord,
)
from app.models.scene import Scene
from app.models.splat import SplatSet, sh_count
from app.services.image_service import load_image
from app.services.splat_service import quaternion_facing, rgb_to_sh_dc

logger = get_logger(__name__)

PathLike = Union[str, Path]

NEIGHBORS = 3
MANIFEST_FILE = "dataset.json"


# ---------------------------------------------------------------------------
# Scene documents
# ---------------------------------------------------------------------------

def _encode_blob(array: np.ndarray) -> BlobRecord:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    return BlobRecord(shape=list(arr.shape), data=base64.b64encode(arr.tobytes()).decode("ascii"))


def _decode_blob(blob: BlobRecord, where: str) -> np.ndarray:
    try:
        raw = base64.b64decode(blob.data.encode("ascii"), validate=True)
    except ValueError as e:
        raise SceneValidationError("deformation", None, where, f"invalid base64 data: {e}") from e
    values = np.frombuffer(raw, dtype="<f8")
    if values.size != int(np.prod(blob.shape)):
        raise SceneValidationError(
            "deformation", None, where, f"{values.size} values do not fill declared shape {blob.shape}"
        )
    return values.reshape(blob.shape).astype(np.float64)


def _splat_records(splats: SplatSet) -> List[SplatRecord]:
    base = splats.detached()
    records = []
    for i in range(base.count):
        records.append(
            SplatRecord(
                center=base.center[i].tolist(),
                rotation=base.rotation[i].tolist(),
                log_scale=base.log_scale[i].tolist(),
                opacity_logit=float(base.opacity_logit[i]),
                sh_coeffs=base.sh_coeffs[i].tolist(),
                tint_logit=None if base.tint_logit is None else float(base.tint_logit[i]),
            )
        )
    return records


def _field_record(field: DeformationField) -> FieldRecord:
    base = field.detached()
    return FieldRecord(
        kind=base.kind,
        pos_freqs=base.pos_freqs,
        time_freqs=base.time_freqs,
        weights=[_encode_blob(w) for w in base.weights],
        biases=[_encode_blob(b) for b in base.biases],
    )


def scene_to_json(scene: Scene) -> str:
    """Canonical text of a scene file."""
    main, env = scene.main.detached(), scene.env.detached()
    degree = main.sh_degree if main.count else env.sh_degree
    document = SceneDocument(
        header=SceneHeader(n_main=main.count, n_env=env.count, sh_degree=degree),
        main=_splat_records(main),
        env=_splat_records(env),
        deformation={MAIN: _field_record(scene.main_field), ENV: _field_record(scene.env_field)},
    )
    return document.json(exclude_none=True, indent=2) + "\n"


def save_scene(scene: Scene, path: PathLike) -> None:
    """
    Write a scene file, replacing any existing file.

    Raises:
        SceneValidationError: the scene breaks a splat invariant
        OSError: the file cannot be written
    """
    path = Path(path)
    scene.main.validate(MAIN)
    scene.env.validate(ENV)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(scene_to_json(scene), encoding="utf-8")
    logger.debug(f"Saved scene with {scene.n_main} main / {scene.n_env} env splats to {path}")


def scene_checksum(scene: Scene) -> str:
    """sha256 of the canonical scene text."""
    return hashlib.sha256(scene_to_json(scene).encode("utf-8")).hexdigest()


def _validation_error(error: ValidationError) -> SceneValidationError:
    first = error.errors()[0]
    loc = list(first["loc"])
    kind = str(loc.pop(0)) if loc else "scene"
    index = loc.pop(0) if loc and isinstance(loc[0], int) else None
    field = ".".join(str(part) for part in loc) or kind
    return SceneValidationError(kind, index, field, first["msg"])


def _splat_set(records: List[SplatRecord], kind: str, degree: int) -> SplatSet:
    n = len(records)
    k = sh_count(degree)
    for i, record in enumerate(records):
        if len(record.sh_coeffs) != k:
            raise SceneValidationError(kind, i, "sh_coeffs", f"expected {k} rows for degree {degree}")
        if kind == MAIN and record.tint_logit is None:
            raise SceneValidationError(kind, i, "tint_logit", "main splats need a tint")
        if kind == ENV and record.tint_logit is not None:
            raise SceneValidationError(kind, i, "tint_logit", "environment splats have no tint")
    splats = SplatSet(
        center=np.array([r.center for r in records], dtype=np.float64).reshape(n, 3),
        rotation=np.array([r.rotation for r in records], dtype=np.float64).reshape(n, 4),
        log_scale=np.array([r.log_scale for r in records], dtype=np.float64).reshape(n, 2),
        opacity_logit=np.array([r.opacity_logit for r in records], dtype=np.float64).reshape(n),
        sh_coeffs=np.array([r.sh_coeffs for r in records], dtype=np.float64).reshape(n, k, 3),
        tint_logit=np.array([r.tint_logit for r in records], dtype=np.float64).reshape(n) if kind == MAIN else None,
    )
    splats.validate(kind)
    return splats


def _field(records: Dict[str, FieldRecord], kind: str) -> DeformationField:
    if kind not in records:
        raise SceneValidationError("deformation", None, kind, "missing residual field")
    record = records[kind]
    if record.kind != kind:
        raise SceneValidationError("deformation", None, kind, f"field declares kind '{record.kind}'")
    field = DeformationField(
        kind=kind,
        pos_freqs=record.pos_freqs,
        time_freqs=record.time_freqs,
        weights=[_decode_blob(b, f"{kind}.weights[{i}]") for i, b in enumerate(record.weights)],
        biases=[_decode_blob(b, f"{kind}.biases[{i}]") for i, b in enumerate(record.biases)],
    )
    try:
        field.check_shapes()
    except ValueError as e:
        raise SceneValidationError("deformation", None, kind, str(e)) from e
    return field


def parse_scene(text: str, source: Optional[str] = None) -> Scene:
    """
    Build a Scene from scene-file text.

    Raises:
        SceneParseError: malformed JSON (with line and column)
        SceneValidationError: schema or invariant violation (kind, index, field)
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneParseError(e.msg, e.lineno, e.colno, source) from e
    try:
        document = SceneDocument.parse_obj(raw)
    except ValidationError as e:
        raise _validation_error(e) from e

    header = document.header
    if len(document.main) != header.n_main:
        raise SceneValidationError("main", None, "count", f"header declares {header.n_main}, file has {len(document.main)}")
    if len(document.env) != header.n_env:
        raise SceneValidationError("env", None, "count", f"header declares {header.n_env}, file has {len(document.env)}")

    return Scene(
        main=_splat_set(document.main, MAIN, header.sh_degree),
        env=_splat_set(document.env, ENV, header.sh_degree),
        main_field=_field(document.deformation, MAIN),
        env_field=_field(document.deformation, ENV),
    )


def load_scene(path: PathLike) -> Scene:
    """Load and fully validate a scene file."""
    path = Path(path)
    scene = parse_scene(path.read_text(encoding="utf-8"), str(path))
    logger.info(f"Loaded scene {path}: {scene.n_main} main, {scene.n_env} env splats")
    return scene


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _neighbor_scales(points: np.ndarray, default_scale: float) -> np.ndarray:
    if len(points) <= NEIGHBORS:
        return np.full(len(points), default_scale)
    distances, _ = cKDTree(points).query(points, k=NEIGHBORS + 1)
    mean = distances[:, 1:].mean(axis=1)
    return np.where(mean > 0.0, mean, default_scale)


def _point_splats(points, colors, config: InitConfig, with_tint: bool, kind: str) -> SplatSet:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise SceneValidationError(kind, None, "points", "at least one point is required")
    if len(colors) != n:
        raise SceneValidationError(kind, None, "colors", f"{len(colors)} colors for {n} points")

    scale = np.log(_neighbor_scales(points, config.default_scale))
    sh = np.zeros((n, sh_count(config.sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(colors)
    return SplatSet(
        center=points.copy(),
        rotation=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scale=np.stack([scale, scale], axis=1),
        opacity_logit=np.full(n, logit(config.initial_opacity)),
        sh_coeffs=sh,
        tint_logit=np.full(n, logit(config.initial_tint)) if with_tint else None,
    )


def init_from_points(points: Sequence[Sequence[float]], colors: Sequence[Sequence[float]], config: Optional[InitConfig] = None) -> SplatSet:
    """
    One main splat per point.

    Scale is the mean distance to the 3 nearest neighbours (the configured
    default with fewer than 4 points); the degree-0 SH term reproduces the
    point color and higher terms are zero.

    Raises:
        SceneValidationError: no points, or colors of a different length
    """
    config = config or InitConfig()
    splats = _point_splats(points, colors, config, with_tint=True, kind=MAIN)
    logger.info(f"Initialized {splats.count} main splats from points")
    return splats


def init_env_sphere(
    count: int,
    center: np.ndarray,
    radius: float,
    rng: np.random.Generator,
    config: Optional[InitConfig] = None,
    colors: Optional[np.ndarray] = None,
) -> SplatSet:
    """Environment splats spread over a sphere, facing its center."""
    config = config or InitConfig()
    if count == 0:
        return SplatSet.empty(config.sh_degree)
    # Fibonacci lattice with a seeded rotation
    i = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / count)
    azimuth = np.pi * (1.0 + 5.0 ** 0.5) * i + rng.uniform(0.0, 2.0 * np.pi)
    dirs = np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1)
    spacing = radius * np.sqrt(4.0 * np.pi / count)
    if colors is None:
        colors = np.full((count, 3), 0.5)
    sh = np.zeros((count, sh_count(config.sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(colors)
    return SplatSet(
        center=np.asarray(center, dtype=np.float64) + radius * dirs,
        rotation=quaternion_facing(-dirs),
        log_scale=np.full((count, 2), np.log(0.5 * spacing)),
        opacity_logit=np.full(count, logit(config.initial_opacity)),
        sh_coeffs=sh,
    )


def init_scene(
    points: np.ndarray,
    colors: np.ndarray,
    init: Optional[InitConfig] = None,
    deform: Optional[DeformConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> Scene:
    """Fresh canonical scene: point splats, environment splats and identity fields."""
    init = init or InitConfig()
    deform = deform or DeformConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    main = init_from_points(points, colors, init)

    if init.env_from_points:
        env = _point_splats(points, colors, init, with_tint=False, kind=ENV)
    else:
        lo, hi = main.center.min(axis=0), main.center.max(axis=0)
        radius = init.env_radius or init.env_radius_factor * max(0.5 * float(np.linalg.norm(hi - lo)), init.default_scale)
        env = init_env_sphere(init.env_count, 0.5 * (lo + hi), radius, rng, init)

    fields = [
        DeformationField.create(kind, deform.pos_freqs, deform.time_freqs, deform.hidden_layers, deform.hidden_width, rng)
        for kind in (MAIN, ENV)
    ]
    return Scene(main, env, fields[0], fields[1])


# ---------------------------------------------------------------------------
# Cameras and datasets
# ---------------------------------------------------------------------------

def camera_from_record(record: CameraRecord) -> Camera:
    return Camera(
        fx=record.fx,
        fy=record.fy,
        cx=record.cx,
        cy=record.cy,
        width=record.width,
        height=record.height,
        world_to_camera=np.array(record.world_to_camera, dtype=np.float64),
        time=record.time,
    )


def camera_to_record(camera: Camera, image: Optional[str] = None, normal_map: Optional[str] = None) -> CameraRecord:
    return CameraRecord(
        fx=camera.fx,
        fy=camera.fy,
        cx=camera.cx,
        cy=camera.cy,
        width=camera.width,
        height=camera.height,
        world_to_camera=camera.world_to_camera.tolist(),
        time=camera.time,
        image=image,
        normal_map=normal_map,
    )


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneParseError(e.msg, e.lineno, e.colno, str(path)) from e


def load_cameras(path: PathLike) -> List[Frame]:
    """
    Read a camera file; image paths are resolved against its directory.

    Raises:
        SceneParseError: malformed JSON
        SceneValidationError: a record breaks a camera invariant
    """
    path = Path(path)
    raw = _read_json(path)
    if not isinstance(raw, list):
        raise SceneParseError("camera file must hold a JSON list", 1, 1, str(path))
    frames = []
    for i, entry in enumerate(raw):
        try:
            record = CameraRecord.parse_obj(entry)
        except ValidationError as e:
            first = e.errors()[0]
            raise SceneValidationError("camera", i, ".".join(str(p) for p in first["loc"]), first["msg"]) from e
        try:
            camera = camera_from_record(record)
        except SceneValidationError as e:
            raise SceneValidationError("camera", i, e.field, str(e)) from e
        frames.append(
            Frame(
                camera=camera,
                image_path=path.parent / record.image if record.image else None,
                normal_path=path.parent / record.normal_map if record.normal_map else None,
            )
        )
    return frames


def save_cameras(frames: Sequence[Frame], path: PathLike) -> None:
    """Write a camera file with image paths relative to its directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def relative(p: Optional[Path]) -> Optional[str]:
        if p is None:
            return None
        p = Path(p)
        try:
            return p.relative_to(path.parent).as_posix()
        except ValueError:
            return p.as_posix()

    records = [
        camera_to_record(f.camera, relative(f.image_path), relative(f.normal_path)).dict(exclude_none=True)
        for f in frames
    ]
    path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")


def load_dataset(path: PathLike, check_images: bool = True) -> Dataset:
    """
    Load a dataset directory (or its dataset.json manifest).

    Raises:
        SceneParseError / SceneValidationError: malformed manifest or cameras
        FileNotFoundError: a referenced file is missing
        ImageFormatError: an image does not decode or has the wrong size
    """
    path = Path(path)
    manifest_path = path / MANIFEST_FILE if path.is_dir() else path
    try:
        manifest = DatasetManifest.parse_obj(_read_json(manifest_path))
    except ValidationError as e:
        raise _validation_error(e) from e
    root = manifest_path.parent
    frames = load_cameras(root / manifest.cameras)
    scene_path = root / manifest.scene
    if not scene_path.exists():
        raise FileNotFoundError(f"dataset scene {scene_path} does not exist")

    for i, frame in enumerate(frames):
        if frame.image_path is None:
            raise SceneValidationError("camera", i, "image", "training frames need a ground-truth image")
        for p in (frame.image_path, frame.normal_path):
            if p is not None and not p.exists():
                raise FileNotFoundError(f"frame {i}: {p} does not exist")
        if check_images:
            shape = (frame.camera.height, frame.camera.width)
            load_image(frame.image_path, shape)
            if frame.normal_path is not None:
                load_image(frame.normal_path, shape)

    logger.info(f"Loaded dataset {manifest_path} with {len(frames)} frames")
    return Dataset(
        frames=frames,
        scene_path=scene_path,
        points_path=root / manifest.points if manifest.points else None,
        background=tuple(manifest.background),
        render_settings=dict(manifest.render),
        trace_settings=dict(manifest.trace),
    )


def save_manifest(manifest: DatasetManifest, directory: PathLike) -> Path:
    path = Path(directory) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.json(indent=2) + "\n", encoding="utf-8")
    return path
