"""
Environment Tracer Service
==========================

Reflection rays against the environment splats.

- `build_bvh`: median-split bounding volume hierarchy over each splat's
  cutoff disk, stored as flat arrays
- `gather_hits`: vectorized traversal of many rays at once, exact
  intersection of the candidates and selection of the k nearest hits
- `trace_specular`: front-to-back compositing of the gathered hits,
  recomputed with autodiff primitives so gradients reach the env splats
- `brute_force_gather` / `brute_force_trace`: exhaustive references

The hit set and its order are constants for differentiation; gradients
flow through hit weights, opacities and colors.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app.config import TraceSettings
from app.core import autodiff as ad
from app.core.exceptions import RenderError
from app.core.logging import get_logger
from app.models.ray import Ray, SplatHit
from app.models.splat import SplatSet
from app.services.raster_service import affine_hits
from app.services.splat_service import (
    eval_sh,
    intersect_batch,
    splat_affine,
    splat_bounds,
    splat_scales,
    tangent_frame,
)

logger = get_logger(__name__)

MAX_DEPTH = 64
BOX_PAD = 1e-9
BRUTE_FORCE_CHUNK = 256


@dataclass
class Bvh:
    """
    Flat binary tree. Node i is a leaf when left[i] < 0; its splats are
    order[start[i]:start[i] + count[i]].
    """

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    depth: int
    splat_lo: np.ndarray
    splat_hi: np.ndarray
    center: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    t_w: np.ndarray
    scales: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def n_splats(self) -> int:
        return len(self.center)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)


def _geometry(env: SplatSet) -> Tuple[np.ndarray, ...]:
    base = env.detached()
    t_u, t_v, t_w = (np.asarray(a) for a in tangent_frame(base.rotation))
    return base.center, t_u, t_v, t_w, np.asarray(splat_scales(base))


def build_bvh(env: SplatSet, settings: Optional[TraceSettings] = None) -> Bvh:
    """
    Build the hierarchy for the environment splats at one time step.

    Each splat is bounded by the box of its disk of local radius
    sqrt(-2 ln cutoff); nodes split at the median centroid along their
    longest centroid extent until at most `leaf_size` splats remain.
    """
    settings = settings or TraceSettings()
    center, t_u, t_v, t_w, scales = _geometry(env)
    n = len(center)
    if n:
        base = env.detached()
        splat_lo, splat_hi = splat_bounds(base.center, base.rotation, base.log_scale, settings.cutoff_radius)
        pad = BOX_PAD * (1.0 + np.maximum(np.abs(splat_lo), np.abs(splat_hi)))
        splat_lo, splat_hi = splat_lo - pad, splat_hi + pad
    else:
        splat_lo = splat_hi = np.zeros((0, 3))

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order: List[int] = []
    max_depth = 0
    if n:
        stack = [(np.arange(n), 0, -1, False)]
        while stack:
            ids, depth, parent, is_right = stack.pop()
            node = len(left)
            if parent >= 0:
                (right if is_right else left)[parent] = node
            lo.append(splat_lo[ids].min(axis=0))
            hi.append(splat_hi[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            max_depth = max(max_depth, depth)
            if len(ids) <= settings.leaf_size or depth >= MAX_DEPTH - 1:
                start[node] = len(order)
                count[node] = len(ids)
                order.extend(int(i) for i in ids)
                continue
            centroids = center[ids]
            axis = int(np.argmax(centroids.max(axis=0) - centroids.min(axis=0)))
            ids = ids[np.argsort(centroids[:, axis], kind="stable")]
            mid = len(ids) // 2
            # children fill in their slot in the parent when popped
            stack.append((ids[mid:], depth + 1, node, True))
            stack.append((ids[:mid], depth + 1, node, False))

    bvh = Bvh(
        lo=np.array(lo).reshape(-1, 3),
        hi=np.array(hi).reshape(-1, 3),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=np.array(order, dtype=np.int64),
        depth=max_depth,
        splat_lo=splat_lo,
        splat_hi=splat_hi,
        center=center,
        t_u=t_u,
        t_v=t_v,
        t_w=t_w,
        scales=scales,
    )
    logger.debug(f"Built BVH over {n} env splats: {bvh.n_nodes} nodes, depth {max_depth}")
    return bvh


def validate_bvh(bvh: Bvh) -> List[str]:
    """Structural problems of a hierarchy; an empty list means it is sound."""
    problems = []
    leaves = bvh.leaves()
    seen = np.concatenate([bvh.order[bvh.start[i]:bvh.start[i] + bvh.count[i]] for i in leaves]) if len(leaves) else np.zeros(0, dtype=np.int64)
    if sorted(seen.tolist()) != list(range(bvh.n_splats)):
        problems.append("splats are not covered exactly once by the leaves")
    if bvh.depth > MAX_DEPTH:
        problems.append(f"depth {bvh.depth} exceeds {MAX_DEPTH}")
    for i in range(bvh.n_nodes):
        if bvh.left[i] < 0:
            ids = bvh.order[bvh.start[i]:bvh.start[i] + bvh.count[i]]
            inner_lo, inner_hi = bvh.splat_lo[ids], bvh.splat_hi[ids]
        else:
            kids = [bvh.left[i], bvh.right[i]]
            inner_lo, inner_hi = bvh.lo[kids], bvh.hi[kids]
        if (inner_lo < bvh.lo[i]).any() or (inner_hi > bvh.hi[i]).any():
            problems.append(f"node {i} does not contain its contents")
    return problems


def _slab(lo: np.ndarray, hi: np.ndarray, origins: np.ndarray, directions: np.ndarray, t_min, t_max) -> np.ndarray:
    """Ray/box overlap of paired rows; zero direction components are handled explicitly."""
    flat = directions == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    inside = (origins >= lo) & (origins <= hi)
    near = np.where(flat, np.where(inside, -np.inf, np.inf), near)
    far = np.where(flat, np.where(inside, np.inf, -np.inf), far)
    entry = np.maximum(near.max(axis=1), t_min)
    exit_ = np.minimum(far.min(axis=1), t_max)
    return entry <= exit_


@dataclass
class HitTable:
    """Up to k hits per ray, sorted by depth; unused slots hold index -1."""

    index: np.ndarray   # (R, k)
    depth: np.ndarray   # (R, k)
    weight: np.ndarray  # (R, k)

    @property
    def valid(self) -> np.ndarray:
        return self.index >= 0

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def _select_nearest(rays: np.ndarray, splats: np.ndarray, depth: np.ndarray, weight: np.ndarray, n_rays: int, k: int) -> HitTable:
    table = HitTable(
        index=np.full((n_rays, k), -1, dtype=np.int64),
        depth=np.full((n_rays, k), np.inf),
        weight=np.zeros((n_rays, k)),
    )
    if rays.size == 0:
        return table
    order = np.lexsort((splats, depth, rays))
    rays, splats, depth, weight = rays[order], splats[order], depth[order], weight[order]
    first = np.searchsorted(rays, rays, side="left")
    rank = np.arange(len(rays)) - first
    keep = rank < k
    table.index[rays[keep], rank[keep]] = splats[keep]
    table.depth[rays[keep], rank[keep]] = depth[keep]
    table.weight[rays[keep], rank[keep]] = weight[keep]
    return table


def _pair_hits(bvh: Bvh, origins, directions, rays, splats, t_min, t_max, cutoff):
    frame = (bvh.t_u[splats], bvh.t_v[splats], bvh.t_w[splats])
    hits = intersect_batch(origins[rays], directions[rays], bvh.center[splats], frame, bvh.scales[splats], t_min, t_max, cutoff)
    ok = hits.valid
    return rays[ok], splats[ok], np.asarray(hits.depth)[ok], np.asarray(hits.weight)[ok]


def gather_hits(
    bvh: Bvh,
    origins: np.ndarray,
    directions: np.ndarray,
    settings: Optional[TraceSettings] = None,
    t_min: float = 0.0,
    t_max: float = np.inf,
) -> HitTable:
    """
    The k nearest hits (weight >= cutoff) of every ray, sorted by depth
    with ties broken by splat index.
    """
    settings = settings or TraceSettings()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n_rays = len(origins)
    found_rays, found_splats, found_depth, found_weight = [], [], [], []

    if bvh.n_nodes and n_rays:
        rays = np.arange(n_rays)
        nodes = np.zeros(n_rays, dtype=np.int64)
        while rays.size:
            overlap = _slab(bvh.lo[nodes], bvh.hi[nodes], origins[rays], directions[rays], t_min, t_max)
            rays, nodes = rays[overlap], nodes[overlap]
            leaf = bvh.left[nodes] < 0
            if leaf.any():
                leaf_rays, leaf_nodes = rays[leaf], nodes[leaf]
                counts = bvh.count[leaf_nodes]
                pair_rays = np.repeat(leaf_rays, counts)
                offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
                pair_splats = bvh.order[np.repeat(bvh.start[leaf_nodes], counts) + offsets]
                r, s, d, w = _pair_hits(bvh, origins, directions, pair_rays, pair_splats, t_min, t_max, settings.gaussian_cutoff)
                found_rays.append(r)
                found_splats.append(s)
                found_depth.append(d)
                found_weight.append(w)
            inner_rays, inner_nodes = rays[~leaf], nodes[~leaf]
            rays = np.concatenate([inner_rays, inner_rays])
            nodes = np.concatenate([bvh.left[inner_nodes], bvh.right[inner_nodes]])

    if not found_rays:
        return _select_nearest(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0), n_rays, settings.k)
    return _select_nearest(
        np.concatenate(found_rays),
        np.concatenate(found_splats),
        np.concatenate(found_depth),
        np.concatenate(found_weight),
        n_rays,
        settings.k,
    )


def brute_force_gather(
    env: SplatSet,
    origins: np.ndarray,
    directions: np.ndarray,
    settings: Optional[TraceSettings] = None,
    t_min: float = 0.0,
    t_max: float = np.inf,
) -> HitTable:
    """Every ray against every splat with the same intersection formula, then the same selection."""
    settings = settings or TraceSettings()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    center, t_u, t_v, t_w, scales = _geometry(env)
    n_rays, n = len(origins), len(center)
    parts = []
    for begin in range(0, n_rays if n else 0, BRUTE_FORCE_CHUNK):
        o = origins[begin:begin + BRUTE_FORCE_CHUNK]
        d = directions[begin:begin + BRUTE_FORCE_CHUNK]
        hits = intersect_batch(
            o[:, None, :], d[:, None, :], center[None], (t_u[None], t_v[None], t_w[None]), scales[None],
            t_min, t_max, settings.gaussian_cutoff,
        )
        r, s = np.nonzero(hits.valid)
        parts.append((r + begin, s, np.asarray(hits.depth)[r, s], np.asarray(hits.weight)[r, s]))
    if not parts:
        empty = np.zeros(0, dtype=np.int64)
        return _select_nearest(empty, empty, np.zeros(0), np.zeros(0), n_rays, settings.k)
    return _select_nearest(*(np.concatenate(p) for p in zip(*parts)), n_rays, settings.k)


def gather_k_hits(ray: Ray, bvh: Bvh, settings: Optional[TraceSettings] = None) -> List[SplatHit]:
    """Nearest-first hits of a single ray (at most k)."""
    table = gather_hits(bvh, ray.origin, ray.direction, settings, ray.t_min, ray.t_max)
    hits = []
    for slot in np.flatnonzero(table.valid[0]):
        i, depth = int(table.index[0, slot]), float(table.depth[0, slot])
        rel = ray.at(depth) - bvh.center[i]
        hits.append(
            SplatHit(
                index=i,
                u=float(rel @ bvh.t_u[i]) / bvh.scales[i, 0],
                v=float(rel @ bvh.t_v[i]) / bvh.scales[i, 1],
                depth=depth,
                weight=float(table.weight[0, slot]),
                world_point=ray.at(depth),
            )
        )
    return hits


@dataclass
class SpecularResult:
    color: "ad.ArrayLike"          # (R, 3)
    transmittance: "ad.ArrayLike"  # (R,)
    hits: HitTable


def trace_specular(
    origins: "ad.ArrayLike",
    directions: "ad.ArrayLike",
    env: SplatSet,
    bvh: Bvh,
    settings: Optional[TraceSettings] = None,
    t_min: float = 0.0,
) -> SpecularResult:
    """
    Specular color of each reflection ray.

    With a_i = alpha_base_i * G_i over the gathered hits and
    T_i = prod_{j<i} (1 - a_j): color = sum T_i a_i c_i, where c_i is the
    env splat's SH color along the ray direction. Rays that accumulate no
    alpha return the miss color with T = 1.
    """
    settings = settings or TraceSettings()
    o_val = np.asarray(ad.value(origins), dtype=np.float64).reshape(-1, 3)
    d_val = np.asarray(ad.value(directions), dtype=np.float64).reshape(-1, 3)
    n_rays = len(o_val)
    table = gather_hits(bvh, o_val, d_val, settings, t_min)
    miss = np.asarray(settings.miss_color, dtype=np.float64)
    layers = int(table.counts.max()) if n_rays else 0
    if layers == 0:
        return SpecularResult(np.tile(miss, (n_rays, 1)), np.ones(n_rays), table)

    valid = table.valid[:, :layers]
    ids = np.where(valid, table.index[:, :layers], 0)
    origins3 = ad.reshape(origins, (n_rays, 1, 3))
    directions3 = ad.reshape(directions, (n_rays, 1, 3))
    t_u, t_v, t_w = tangent_frame(ad.getitem(env.rotation, ids))
    hits = intersect_batch(
        origins3,
        directions3,
        ad.getitem(env.center, ids),
        (t_u, t_v, t_w),
        ad.getitem(splat_scales(env), ids),
        -np.inf,
        np.inf,
        0.0,
    )
    alpha = ad.where(valid, ad.getitem(env.opacity, ids) * hits.weight, 0.0)
    color = eval_sh(ad.getitem(env.sh_coeffs, ids), directions3)

    transmittance: "ad.ArrayLike" = np.ones(n_rays)
    acc: "ad.ArrayLike" = np.zeros((n_rays, 3))
    acc_alpha = np.zeros(n_rays)
    for i in range(layers):
        active = valid[:, i] & (np.asarray(ad.value(transmittance)) >= settings.early_stop)
        if not active.any():
            break
        a_i = ad.getitem(alpha, (slice(None), i))
        w = ad.where(active, a_i * transmittance, 0.0)
        acc = acc + ad.expand_last(w) * ad.getitem(color, (slice(None), i))
        acc_alpha = acc_alpha + np.asarray(ad.value(w))
        transmittance = ad.where(active, transmittance * (1.0 - a_i), transmittance)

    missed = acc_alpha <= 0.0
    return SpecularResult(
        color=ad.where(missed[:, None], miss, acc),
        transmittance=ad.where(missed, 1.0, transmittance),
        hits=table,
    )


@dataclass
class TraceResult:
    color: np.ndarray
    transmittance: float
    hits: int


def inverse_affines(env: SplatSet) -> np.ndarray:
    base = env.detached()
    return np.linalg.inv(splat_affine(base)) if base.count else np.zeros((0, 4, 4))


def brute_force_trace(
    ray: Ray,
    env: SplatSet,
    settings: Optional[TraceSettings] = None,
    inverse: Optional[np.ndarray] = None,
) -> TraceResult:
    """
    Reference trace of one ray: every splat intersected through its inverse
    affine map, full sort, first k hits composited in a plain loop.

    `inverse` may carry precomputed inverse_affines(env) when tracing many rays.
    """
    settings = settings or TraceSettings()
    base = env.detached()
    if inverse is None:
        inverse = inverse_affines(base)
    found = affine_hits(inverse, ray.origin, ray.direction, ray.t_min, ray.t_max, settings.gaussian_cutoff)
    index = found.index[: settings.k]
    opacity = np.asarray(base.opacity)
    transmittance, alpha_sum = 1.0, 0.0
    color = np.zeros(3)
    for j, i in enumerate(index):
        if transmittance < settings.early_stop:
            break
        a = opacity[i] * found.weight[j]
        c = np.asarray(eval_sh(base.sh_coeffs[i], ray.direction))
        color = color + transmittance * a * c
        alpha_sum += transmittance * a
        transmittance *= 1.0 - a
    if alpha_sum <= 0.0:
        return TraceResult(np.asarray(settings.miss_color, dtype=np.float64), 1.0, len(index))
    return TraceResult(color, transmittance, len(index))


def scene_diagonal(*sets: SplatSet) -> float:
    """Diagonal of the box around every splat center."""
    centers = [np.asarray(ad.value(s.center)) for s in sets if s.count]
    if not centers:
        return 0.0
    points = np.concatenate(centers)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def resolve_epsilon(settings: TraceSettings, *sets: SplatSet) -> float:
    """Configured offset, or the configured fraction of the scene diagonal."""
    if settings.epsilon is not None:
        return settings.epsilon
    diagonal = scene_diagonal(*sets)
    if diagonal <= 0.0:
        raise RenderError("cannot derive a self-intersection offset from an empty or degenerate scene; set epsilon")
    return settings.epsilon_fraction * diagonal
