"""
Splat Geometry Service
======================

Exact per-splat geometry shared by the rasterizer, the tracer and the
oracles:
- Tangent frames from unit quaternions (t_w = t_u x t_v)
- Plane parameterization P(u, v) = p + s_u t_u u + s_v t_v v
- Gaussian kernel exp(-(u^2 + v^2) / 2)
- Mirror reflection of directions
- Ray / splat-plane intersection, single ray and batched
- Local-to-world affine map H of a splat
- Real spherical harmonics up to degree 2

Batched functions are written with the autodiff primitives, so they work
on plain arrays and on recorded `Var`s alike.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.core import autodiff as ad
from app.core.logging import get_logger
from app.models.ray import Ray, SplatHit
from app.models.splat import SCALE_FLOOR, sh_count, sh_degree_of

logger = get_logger(__name__)

PARALLEL_EPS = 1e-12

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def tangent_frame(rotation: "ad.ArrayLike") -> Tuple["ad.ArrayLike", "ad.ArrayLike", "ad.ArrayLike"]:
    """
    Orthonormal right-handed frame of a unit quaternion (w, x, y, z).

    Returns the first two columns of the rotation matrix and their cross
    product, so t_w = t_u x t_v holds exactly.
    """
    w, x, y, z = (ad.getitem(rotation, (..., i)) for i in range(4))
    t_u = ad.stack(
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y + w * z),
            2.0 * (x * z - w * y),
        ],
        axis=-1,
    )
    t_v = ad.stack(
        [
            2.0 * (x * y - w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z + w * x),
        ],
        axis=-1,
    )
    return t_u, t_v, ad.cross(t_u, t_v)


def quaternion_facing(normals: np.ndarray) -> np.ndarray:
    """Unit quaternions whose tangent frame has t_w equal to each given unit normal."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    q = np.stack([1.0 + n[:, 2], -n[:, 1], n[:, 0], np.zeros(len(n))], axis=1)
    flipped = q[:, 0] < 1e-9
    q[flipped] = (0.0, 1.0, 0.0, 0.0)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quaternion_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(0.5 * angle)], np.sin(0.5 * angle) * axis])


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b (rotation b first, then a), broadcasting over rows."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def splat_scales(splat) -> "ad.ArrayLike":
    """exp(log_scale) floored at 1e-6 world units."""
    return ad.clamp(ad.exp(splat.log_scale), SCALE_FLOOR)


def plane_point(splat, u: "ad.ArrayLike", v: "ad.ArrayLike") -> "ad.ArrayLike":
    """World point at local coordinates (u, v) of the splat plane."""
    t_u, t_v, _ = tangent_frame(splat.rotation)
    s = splat_scales(splat)
    s_u, s_v = ad.getitem(s, (..., slice(0, 1))), ad.getitem(s, (..., slice(1, 2)))
    return splat.center + s_u * t_u * ad.expand_last(u) + s_v * t_v * ad.expand_last(v)


def gaussian_weight(u: "ad.ArrayLike", v: "ad.ArrayLike") -> "ad.ArrayLike":
    return ad.exp(-0.5 * (u * u + v * v))


def splat_normal(splat) -> "ad.ArrayLike":
    return tangent_frame(splat.rotation)[2]


def reflect(d_in: "ad.ArrayLike", n: "ad.ArrayLike") -> "ad.ArrayLike":
    """d_out = d_in - 2 (d_in . n) n over the last axis."""
    return d_in - 2.0 * ad.expand_last(ad.dot(d_in, n)) * n


def splat_affine(splat) -> np.ndarray:
    """
    4x4 matrix H mapping local homogeneous (u, v, 0, 1) to world space.

    Columns are s_u t_u, s_v t_v, t_w and the center; the t_w column keeps
    H invertible and makes the local z axis a unit distance.
    """
    rotation = np.asarray(ad.value(splat.rotation), dtype=np.float64)
    t_u, t_v, t_w = (np.asarray(a) for a in tangent_frame(rotation))
    s = np.maximum(np.exp(np.asarray(ad.value(splat.log_scale), dtype=np.float64)), SCALE_FLOOR)
    h = np.zeros(rotation.shape[:-1] + (4, 4))
    h[..., :3, 0] = s[..., 0:1] * t_u
    h[..., :3, 1] = s[..., 1:2] * t_v
    h[..., :3, 2] = t_w
    h[..., :3, 3] = np.asarray(ad.value(splat.center))
    h[..., 3, 3] = 1.0
    return h


def intersect_ray_splat(ray: Ray, splat, cutoff: float = np.exp(-4.5), index: int = 0) -> Optional[SplatHit]:
    """
    Intersect one ray with one splat's tangent plane.

    Returns None when the ray is parallel to the plane, the depth falls
    outside [t_min, t_max] or the kernel weight is below `cutoff`.
    """
    t_u, t_v, t_w = (np.asarray(a) for a in tangent_frame(np.asarray(splat.rotation, dtype=np.float64)))
    center = np.asarray(splat.center, dtype=np.float64)
    denom = float(ray.direction @ t_w)
    if abs(denom) < PARALLEL_EPS:
        return None
    depth = float((center - ray.origin) @ t_w) / denom
    if not ray.t_min <= depth <= ray.t_max:
        return None
    s = np.maximum(np.exp(np.asarray(splat.log_scale, dtype=np.float64)), SCALE_FLOOR)
    rel = (ray.origin - center) + depth * ray.direction
    u = float(rel @ t_u) / s[0]
    v = float(rel @ t_v) / s[1]
    weight = float(gaussian_weight(u, v))
    if weight < cutoff:
        return None
    world = np.asarray(plane_point(splat, u, v), dtype=np.float64)
    return SplatHit(index=index, u=u, v=v, depth=depth, weight=weight, world_point=world)


@dataclass
class BatchHits:
    """Pairwise ray/splat intersections; `valid` is a constant mask."""

    depth: "ad.ArrayLike"
    u: "ad.ArrayLike"
    v: "ad.ArrayLike"
    weight: "ad.ArrayLike"
    valid: np.ndarray


def intersect_batch(
    origins: "ad.ArrayLike",
    directions: "ad.ArrayLike",
    centers: "ad.ArrayLike",
    frame: Tuple["ad.ArrayLike", "ad.ArrayLike", "ad.ArrayLike"],
    scales: "ad.ArrayLike",
    t_min: float,
    t_max: float,
    cutoff: float,
) -> BatchHits:
    """
    Broadcast intersection of rays against splat planes.

    Rays and splats are laid out so their leading axes broadcast (for
    example rays (P, 1, 3) against splats (1, S, 3)).
    """
    t_u, t_v, t_w = frame
    denom = ad.dot(directions, t_w)
    offset = origins - centers
    depth = -ad.dot(offset, t_w) / denom
    rel = offset + ad.expand_last(depth) * directions
    u = ad.dot(rel, t_u) / ad.getitem(scales, (..., 0))
    v = ad.dot(rel, t_v) / ad.getitem(scales, (..., 1))
    weight = gaussian_weight(u, v)

    d, wv = ad.value(depth), ad.value(weight)
    with np.errstate(invalid="ignore"):
        valid = (
            (np.abs(ad.value(denom)) >= PARALLEL_EPS)
            & np.isfinite(d)
            & (d >= t_min)
            & (d <= t_max)
            & (wv >= cutoff)
        )
    return BatchHits(depth=depth, u=u, v=v, weight=weight, valid=valid)


def splat_bounds(centers: np.ndarray, rotations: np.ndarray, log_scales: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box around each splat's disk of local radius `radius`."""
    t_u, t_v, _ = (np.asarray(a) for a in tangent_frame(rotations))
    s = np.maximum(np.exp(log_scales), SCALE_FLOOR)
    half = radius * np.sqrt((s[:, 0:1] * t_u) ** 2 + (s[:, 1:2] * t_v) ** 2)
    return centers - half, centers + half


def sh_basis(direction: "ad.ArrayLike", degree: int) -> "ad.ArrayLike":
    """Real SH basis (graphics sign convention) at unit directions, shape (..., (degree+1)^2)."""
    x, y, z = (ad.getitem(direction, (..., i)) for i in range(3))
    terms = [SH_C0 * ad.value(x) * 0.0 + SH_C0]
    if degree >= 1:
        terms += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        terms += [
            SH_C2[0] * (x * y),
            SH_C2[1] * (y * z),
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * (x * z),
            SH_C2[4] * (xx - yy),
        ]
    return ad.stack(terms, axis=-1)


def eval_sh(coeffs: "ad.ArrayLike", direction: "ad.ArrayLike", degree: Optional[int] = None) -> "ad.ArrayLike":
    """
    Evaluate per-channel SH coefficients (..., K, 3) toward `direction`.

    The result is clamped to >= 0 with a straight-through gradient.

    Raises:
        ValueError: requested degree exceeds the stored degree
    """
    stored = sh_degree_of(np.shape(ad.value(coeffs))[-2])
    degree = stored if degree is None else degree
    if degree > stored:
        raise ValueError(f"SH degree {degree} requested but only degree {stored} is stored")
    basis = sh_basis(direction, degree)
    k = sh_count(degree)
    used = coeffs if k == sh_count(stored) else ad.getitem(coeffs, (..., slice(0, k), slice(None)))
    weighted = used * ad.expand_last(basis)
    return ad.clamp(ad.sum_(weighted, axis=-2), 0.0)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficient reproducing `rgb` in every direction."""
    return np.asarray(rgb, dtype=np.float64) / SH_C0
