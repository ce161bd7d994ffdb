"""
Rasterizer Service
==================

Front-to-back compositing of the main-content splats for one camera.

Every pixel's center ray is intersected exactly with the tangent plane of
each candidate splat; candidates come from a per-tile cull of the splat's
projected 3-sigma square. Hits are sorted by depth (ties by splat index)
and composited with early termination once transmittance falls below the
configured threshold.

Outputs per pixel: diffuse color, expected depth, blended normal,
alpha_spec (composited specular tint), final transmittance and alpha.

Also provides:
- composite_pixel: the plain per-pixel fold used by the oracles
- pseudo_normals_from_depth: normals from back-projected depth gradients
- oracle_render: brute-force per-pixel reference with no tiling
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.config import RenderSettings, get_settings
from app.core import autodiff as ad
from app.core.exceptions import RenderError
from app.core.logging import get_logger
from app.models.buffers import RenderBuffers
from app.models.camera import Camera
from app.models.splat import SplatSet
from app.services.splat_service import (
    PARALLEL_EPS,
    eval_sh,
    gaussian_weight,
    intersect_batch,
    splat_affine,
    splat_normal,
    splat_scales,
    tangent_frame,
)

logger = get_logger(__name__)

PSEUDO_NORMAL_EPS = 1e-9


# ---------------------------------------------------------------------------
# Per-pixel reference fold
# ---------------------------------------------------------------------------

@dataclass
class CompositeSample:
    """One sorted hit as seen by the compositor."""

    alpha_base: float
    weight: float
    tint: float
    color: np.ndarray
    normal: np.ndarray
    depth: float


@dataclass
class PixelComposite:
    diffuse: np.ndarray
    depth: float
    normal: np.ndarray
    alpha_spec: float
    transmittance: float
    alpha: float
    layers: int


def composite_pixel(
    samples: Sequence[CompositeSample],
    background: Sequence[float] = (0.0, 0.0, 0.0),
    early_stop: float = 1e-4,
    alpha_mask_threshold: float = 0.5,
    far: float = 1e4,
) -> PixelComposite:
    """
    Front-to-back fold over depth-sorted samples.

    With a_i = alpha_base_i * G_i and T_i = prod_{j<i} (1 - a_j):
    diffuse = sum c_i a_i T_i + T * background, alpha_spec = sum tint_i a_i T_i,
    depth = sum d_i a_i T_i / sum a_i T_i (far when nothing is hit) and
    normal = normalize(sum n_i a_i T_i) above the alpha mask threshold.
    """
    transmittance = 1.0
    color = np.zeros(3)
    normal = np.zeros(3)
    depth = alpha = alpha_spec = 0.0
    layers = 0
    for sample in samples:
        if transmittance < early_stop:
            break
        a = sample.alpha_base * sample.weight
        w = a * transmittance
        color = color + w * np.asarray(sample.color)
        normal = normal + w * np.asarray(sample.normal)
        depth += w * sample.depth
        alpha += w
        alpha_spec += w * sample.tint
        transmittance = transmittance * (1.0 - a)
        layers += 1

    length = float(np.linalg.norm(normal))
    unit = normal / length if alpha > alpha_mask_threshold and length > 0.0 else np.zeros(3)
    return PixelComposite(
        diffuse=color + transmittance * np.asarray(background, dtype=np.float64),
        depth=depth / alpha if alpha > 0.0 else far,
        normal=unit,
        alpha_spec=alpha_spec,
        transmittance=transmittance,
        alpha=alpha,
        layers=layers,
    )


# ---------------------------------------------------------------------------
# Tile culling
# ---------------------------------------------------------------------------

def _tile_grid(camera: Camera, tile: int) -> Tuple[int, int]:
    return (camera.height + tile - 1) // tile, (camera.width + tile - 1) // tile


def footprint_tiles(splats: SplatSet, camera: Camera, settings: RenderSettings) -> np.ndarray:
    """
    Inclusive tile ranges (ty0, ty1, tx0, tx1) covered by each splat.

    The projected corners of the splat's cutoff square bound its footprint;
    a square reaching behind the near plane covers the whole screen, and a
    footprint entirely off screen yields an empty range (ty0 > ty1).
    """
    n = splats.count
    rows, cols = _tile_grid(camera, settings.tile_size)
    if n == 0:
        return np.zeros((0, 4), dtype=np.int64)
    center = np.asarray(ad.value(splats.center))
    t_u, t_v, _ = (np.asarray(a) for a in tangent_frame(np.asarray(ad.value(splats.rotation))))
    s = np.asarray(ad.value(splat_scales(splats.detached())))
    r = settings.cutoff_radius
    du, dv = r * s[:, 0:1] * t_u, r * s[:, 1:2] * t_v
    corners = np.stack([center + du + dv, center + du - dv, center - du + dv, center - du - dv], axis=1)
    px, z = camera.project(corners)

    behind = (z <= settings.near).any(axis=1)
    with np.errstate(invalid="ignore"):
        x0 = np.floor(px[..., 0].min(axis=1) - 0.5)
        x1 = np.ceil(px[..., 0].max(axis=1) - 0.5)
        y0 = np.floor(px[..., 1].min(axis=1) - 0.5)
        y1 = np.ceil(px[..., 1].max(axis=1) - 0.5)
    tile = settings.tile_size
    ranges = np.stack(
        [
            np.clip(y0, 0, camera.height - 1) // tile,
            np.clip(y1, -1, camera.height - 1) // tile,
            np.clip(x0, 0, camera.width - 1) // tile,
            np.clip(x1, -1, camera.width - 1) // tile,
        ],
        axis=1,
    )
    offscreen = (x1 < 0) | (y1 < 0) | (x0 > camera.width - 1) | (y0 > camera.height - 1)
    ranges = np.where(np.isfinite(ranges), ranges, 0).astype(np.int64)
    ranges[offscreen & ~behind] = (1, 0, 1, 0)
    ranges[behind] = (0, rows - 1, 0, cols - 1)
    return ranges


# ---------------------------------------------------------------------------
# Vectorized render
# ---------------------------------------------------------------------------

@dataclass
class _SplatTerms:
    """Per-splat quantities shared by every tile of one render."""

    center: "ad.ArrayLike"
    t_u: "ad.ArrayLike"
    t_v: "ad.ArrayLike"
    t_w: "ad.ArrayLike"
    scales: "ad.ArrayLike"
    alpha_base: "ad.ArrayLike"
    tint: "ad.ArrayLike"
    color: "ad.ArrayLike"
    normal: "ad.ArrayLike"


def splat_colors(splats: SplatSet, origin: np.ndarray) -> "ad.ArrayLike":
    """SH color of each splat seen from `origin` (direction camera -> center)."""
    view = ad.normalize(splats.center - origin)
    return eval_sh(splats.sh_coeffs, view)


def _prepare(splats: SplatSet, camera: Camera, settings: RenderSettings) -> _SplatTerms:
    origin = camera.origin
    t_u, t_v, t_w = tangent_frame(splats.rotation)
    normal = t_w
    if settings.flip_normals:
        view = np.asarray(ad.value(splats.center)) - origin
        facing_away = np.sum(np.asarray(ad.value(t_w)) * view, axis=-1) > 0.0
        normal = ad.where(facing_away[:, None], -t_w, t_w)
    return _SplatTerms(
        center=splats.center,
        t_u=t_u,
        t_v=t_v,
        t_w=t_w,
        scales=splat_scales(splats),
        alpha_base=splats.opacity,
        tint=splats.tint,
        color=splat_colors(splats, origin),
        normal=normal,
    )


def _take(x: "ad.ArrayLike", index: np.ndarray) -> "ad.ArrayLike":
    return ad.getitem(x, index)


def _render_tile(
    terms: _SplatTerms,
    candidates: np.ndarray,
    pixel_ids: np.ndarray,
    directions: np.ndarray,
    origin: np.ndarray,
    settings: RenderSettings,
) -> List["ad.ArrayLike"]:
    """Composite one tile; returns diffuse, depth, normal, alpha_spec, T, alpha rows."""
    p = len(pixel_ids)
    background = np.asarray(settings.background, dtype=np.float64)
    if candidates.size == 0:
        return [
            np.tile(background, (p, 1)),
            np.full(p, settings.far),
            np.zeros((p, 3)),
            np.zeros(p),
            np.ones(p),
            np.zeros(p),
        ]

    frame = tuple(ad.reshape(_take(x, candidates), (1, -1, 3)) for x in (terms.t_u, terms.t_v, terms.t_w))
    hits = intersect_batch(
        origin[None, None, :],
        directions[:, None, :],
        ad.reshape(_take(terms.center, candidates), (1, -1, 3)),
        frame,
        ad.reshape(_take(terms.scales, candidates), (1, -1, 2)),
        settings.near,
        settings.far,
        settings.gaussian_cutoff,
    )

    sort_key = np.where(hits.valid, ad.value(hits.depth), np.inf)
    order = np.argsort(sort_key, axis=1, kind="stable")
    layers = int(hits.valid.sum(axis=1).max())
    order = order[:, :layers]
    rows = np.arange(p)[:, None]
    valid = hits.valid[rows, order]

    splat_ids = candidates[order]
    alpha = ad.where(valid, _take(terms.alpha_base, splat_ids) * ad.getitem(hits.weight, (rows, order)), 0.0)
    depth = ad.getitem(hits.depth, (rows, order))
    color = _take(terms.color, splat_ids)
    normal = _take(terms.normal, splat_ids)
    tint = _take(terms.tint, splat_ids)

    transmittance: "ad.ArrayLike" = np.ones(p)
    acc_color: "ad.ArrayLike" = np.zeros((p, 3))
    acc_normal: "ad.ArrayLike" = np.zeros((p, 3))
    acc_depth: "ad.ArrayLike" = np.zeros(p)
    acc_alpha: "ad.ArrayLike" = np.zeros(p)
    acc_spec: "ad.ArrayLike" = np.zeros(p)
    for i in range(layers):
        active = valid[:, i] & (np.asarray(ad.value(transmittance)) >= settings.early_stop)
        if not active.any():
            break
        a_i = ad.getitem(alpha, (slice(None), i))
        w = ad.where(active, a_i * transmittance, 0.0)
        w3 = ad.expand_last(w)
        acc_color = acc_color + w3 * ad.getitem(color, (slice(None), i))
        acc_normal = acc_normal + w3 * ad.getitem(normal, (slice(None), i))
        acc_depth = acc_depth + w * ad.where(active, ad.getitem(depth, (slice(None), i)), 0.0)
        acc_alpha = acc_alpha + w
        acc_spec = acc_spec + w * ad.getitem(tint, (slice(None), i))
        transmittance = ad.where(active, transmittance * (1.0 - a_i), transmittance)

    alpha_value = np.asarray(ad.value(acc_alpha))
    hit = alpha_value > 0.0
    covered = alpha_value > settings.alpha_mask_threshold
    return [
        acc_color + ad.expand_last(transmittance) * background,
        ad.where(hit, acc_depth / ad.where(hit, acc_alpha, 1.0), settings.far),
        ad.where(covered[:, None], ad.normalize(acc_normal), 0.0),
        acc_spec,
        transmittance,
        acc_alpha,
    ]


def _is_taped(splats: SplatSet) -> bool:
    fields = (splats.center, splats.rotation, splats.log_scale, splats.opacity_logit, splats.sh_coeffs, splats.tint_logit)
    return any(ad.is_var(f) for f in fields)


def render(
    splats: SplatSet,
    camera: Camera,
    settings: Optional[RenderSettings] = None,
    workers: Optional[int] = None,
) -> RenderBuffers:
    """
    Rasterize deformed main splats for one camera.

    Untaped renders fan tiles out over a thread pool; taped renders run
    tiles in order on the caller's thread. Both give identical values.

    Raises:
        RenderError: zero-resolution camera
    """
    settings = settings or RenderSettings()
    if camera.width == 0 or camera.height == 0:
        raise RenderError(f"camera resolution {camera.width}x{camera.height} has no pixels")
    if not splats.has_tint:
        splats = splats.with_fields(tint_logit=np.full(splats.count, -np.inf))

    tile = settings.tile_size
    rows, cols = _tile_grid(camera, tile)
    ranges = footprint_tiles(splats, camera, settings)
    terms = _prepare(splats, camera, settings)
    directions = camera.ray_directions().reshape(-1, 3)
    origin = camera.origin

    jobs = []
    for ty in range(rows):
        for tx in range(cols):
            hit = (ranges[:, 0] <= ty) & (ty <= ranges[:, 1]) & (ranges[:, 2] <= tx) & (tx <= ranges[:, 3])
            ys, xs = np.mgrid[ty * tile:min((ty + 1) * tile, camera.height), tx * tile:min((tx + 1) * tile, camera.width)]
            pixel_ids = (ys * camera.width + xs).ravel()
            jobs.append((np.flatnonzero(hit), pixel_ids))

    def run(job):
        candidates, pixel_ids = job
        return _render_tile(terms, candidates, pixel_ids, directions[pixel_ids], origin, settings)

    workers = workers if workers is not None else get_settings().WORKERS
    if workers > 1 and not _is_taped(splats):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(job) for job in jobs]

    total = camera.pixel_count
    row_ids = [job[1] for job in jobs]
    h, w = camera.height, camera.width

    def gather(i: int, shape: tuple) -> "ad.ArrayLike":
        return ad.reshape(ad.assemble([part[i] for part in parts], row_ids, total), shape)

    return RenderBuffers(
        diffuse=gather(0, (h, w, 3)),
        depth=gather(1, (h, w)),
        normal=gather(2, (h, w, 3)),
        alpha_spec=gather(3, (h, w)),
        final_transmittance=gather(4, (h, w)),
        alpha=gather(5, (h, w)),
    )


# ---------------------------------------------------------------------------
# Pseudo normals
# ---------------------------------------------------------------------------

def _axis_gradient(points: "ad.ArrayLike", axis: int) -> "ad.ArrayLike":
    """Central differences along `axis` (0 rows, 1 columns), one-sided at the borders."""
    size = np.shape(ad.value(points))[axis]
    if size < 2:
        return np.zeros(np.shape(ad.value(points)))

    def cut(start, stop):
        index = [slice(None)] * 3
        index[axis] = slice(start, stop)
        return ad.getitem(points, tuple(index))

    first = cut(1, 2) - cut(0, 1)
    last = cut(size - 1, size) - cut(size - 2, size - 1)
    if size == 2:
        return ad.concat([first, last], axis=axis)
    middle = 0.5 * (cut(2, size) - cut(0, size - 2))
    return ad.concat([first, middle, last], axis=axis)


def pseudo_normals_from_depth(depth: "ad.ArrayLike", camera: Camera) -> Tuple["ad.ArrayLike", np.ndarray]:
    """
    Normals of the surface traced by the depth buffer.

    Pixels are back-projected to P = origin + depth * ray_direction; the
    normal is the normalized cross product of the column and row gradients,
    oriented toward the camera. Pixels whose cross product is shorter than
    1e-9 are masked and set to zero.

    Returns:
        (normals (H, W, 3), valid mask (H, W))
    """
    directions = camera.ray_directions()
    points = camera.origin + ad.expand_last(depth) * directions
    du = _axis_gradient(points, 1)
    dv = _axis_gradient(points, 0)
    cross = ad.cross(du, dv)
    length = np.linalg.norm(np.asarray(ad.value(cross)), axis=-1)
    valid = length >= PSEUDO_NORMAL_EPS
    unit = ad.normalize(cross)
    sign = np.where(np.sum(np.asarray(ad.value(unit)) * directions, axis=-1) > 0.0, -1.0, 1.0)
    return ad.where(valid[..., None], unit * sign[..., None], 0.0), valid


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleHits:
    """Exhaustive per-ray intersections via the inverse affine map."""

    index: np.ndarray
    depth: np.ndarray
    weight: np.ndarray


def affine_hits(
    inverse: np.ndarray,
    origin: np.ndarray,
    direction: np.ndarray,
    t_min: float,
    t_max: float,
    cutoff: float,
) -> OracleHits:
    """
    All hits of one ray against every splat, sorted by (depth, index).

    The ray is mapped into each splat's local frame with H^-1; the local
    plane is z = 0 and the kernel is evaluated at the local (u, v).
    """
    if len(inverse) == 0:
        return OracleHits(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    local_origin = inverse[:, :3, :3] @ origin + inverse[:, :3, 3]
    local_dir = inverse[:, :3, :3] @ direction
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -local_origin[:, 2] / local_dir[:, 2]
        uv = local_origin[:, :2] + t[:, None] * local_dir[:, :2]
    weight = gaussian_weight(uv[:, 0], uv[:, 1])
    ok = (np.abs(local_dir[:, 2]) >= PARALLEL_EPS) & np.isfinite(t) & (t >= t_min) & (t <= t_max) & (weight >= cutoff)
    index = np.flatnonzero(ok)
    order = np.lexsort((index, t[index]))
    index = index[order]
    return OracleHits(index=index, depth=t[index], weight=weight[index])


def oracle_render(splats: SplatSet, camera: Camera, settings: Optional[RenderSettings] = None) -> RenderBuffers:
    """
    Brute-force reference: every pixel against every splat, full sort, no tiles.

    Returns numpy buffers only.
    """
    settings = settings or RenderSettings()
    if camera.width == 0 or camera.height == 0:
        raise RenderError(f"camera resolution {camera.width}x{camera.height} has no pixels")
    base = splats.detached()
    n = base.count
    origin = camera.origin
    inverse = np.linalg.inv(splat_affine(base)) if n else np.zeros((0, 4, 4))
    alpha_base = np.asarray(base.opacity)
    tint = np.asarray(base.tint) if base.has_tint else np.zeros(n)
    colors = np.asarray(splat_colors(base, origin)) if n else np.zeros((0, 3))
    normals = np.asarray(splat_normal(base)) if n else np.zeros((0, 3))
    if settings.flip_normals and n:
        away = np.sum(normals * (base.center - origin), axis=-1) > 0.0
        normals = np.where(away[:, None], -normals, normals)

    h, w = camera.height, camera.width
    out = {
        "diffuse": np.zeros((h, w, 3)),
        "depth": np.zeros((h, w)),
        "normal": np.zeros((h, w, 3)),
        "alpha_spec": np.zeros((h, w)),
        "final_transmittance": np.zeros((h, w)),
        "alpha": np.zeros((h, w)),
    }
    directions = camera.ray_directions()
    for y in range(h):
        for x in range(w):
            hits = affine_hits(inverse, origin, directions[y, x], settings.near, settings.far, settings.gaussian_cutoff)
            samples = [
                CompositeSample(alpha_base[i], hits.weight[j], tint[i], colors[i], normals[i], hits.depth[j])
                for j, i in enumerate(hits.index)
            ]
            # Stopping once T < early_stop moves each channel by at most early_stop * max|c|
            # over the skipped splat colors and the background, so <= 1e-4 for colors in [0, 1].
            pixel = composite_pixel(samples, settings.background, settings.early_stop, settings.alpha_mask_threshold, settings.far)
            out["diffuse"][y, x] = pixel.diffuse
            out["depth"][y, x] = pixel.depth
            out["normal"][y, x] = pixel.normal
            out["alpha_spec"][y, x] = pixel.alpha_spec
            out["final_transmittance"][y, x] = pixel.transmittance
            out["alpha"][y, x] = pixel.alpha
    return RenderBuffers(**out)
