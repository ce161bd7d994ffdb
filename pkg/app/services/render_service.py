"""
Hybrid Render Service
=====================

Full frame rendering: deform the canonical scene to the camera's time,
rasterize the main content, trace reflection rays against the environment
and blend

    C = (1 - alpha_spec) C_diffuse + alpha_spec C_specular

on pixels whose accumulated alpha exceeds the mask threshold; all other
pixels keep the diffuse (background-composited) color.

Reflection rays start at the expected-depth surface point offset by
epsilon along the rendered normal oriented toward the camera.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.config import RenderSettings, TraceSettings
from app.core import autodiff as ad
from app.core.logging import get_logger
from app.models.buffers import RenderBuffers
from app.models.camera import Camera
from app.models.ray import Ray
from app.models.scene import Scene
from app.models.splat import SplatSet
from app.services.deform_service import deform_scene
from app.services.raster_service import oracle_render, render
from app.services.splat_service import reflect
from app.services.tracer_service import brute_force_trace, build_bvh, inverse_affines, resolve_epsilon, trace_specular

logger = get_logger(__name__)


@dataclass
class HybridFrame:
    """Final image plus everything that produced it."""

    image: "ad.ArrayLike"      # (H, W, 3)
    buffers: RenderBuffers
    specular: np.ndarray       # (H, W, 3), zero where nothing was traced
    traced: np.ndarray         # (H, W) mask of traced pixels
    main: SplatSet
    env: SplatSet


def reflection_rays(
    camera: Camera,
    depth: "ad.ArrayLike",
    normal: "ad.ArrayLike",
    pixel_ids: np.ndarray,
    epsilon: float,
):
    """Origins and directions of reflection rays for flat pixel indices."""
    directions = camera.ray_directions().reshape(-1, 3)[pixel_ids]
    d = ad.getitem(ad.reshape(depth, (-1,)), pixel_ids)
    n = ad.getitem(ad.reshape(normal, (-1, 3)), pixel_ids)
    facing_away = np.sum(np.asarray(ad.value(n)) * directions, axis=-1) > 0.0
    n = ad.where(facing_away[:, None], -n, n)
    origins = camera.origin + ad.expand_last(d) * directions + epsilon * n
    return origins, reflect(directions, n)


def blend(diffuse: "ad.ArrayLike", specular: "ad.ArrayLike", alpha_spec: "ad.ArrayLike") -> "ad.ArrayLike":
    a = ad.expand_last(alpha_spec)
    return (1.0 - a) * diffuse + a * specular


def render_hybrid(
    scene: Scene,
    t: float,
    camera: Camera,
    render_settings: Optional[RenderSettings] = None,
    trace_settings: Optional[TraceSettings] = None,
    epsilon: Optional[float] = None,
    specular: bool = True,
    workers: Optional[int] = None,
) -> HybridFrame:
    """
    Render the scene at time t; with `specular=False` the image is the
    diffuse buffer alone.
    """
    render_settings = render_settings or RenderSettings()
    trace_settings = trace_settings or TraceSettings()
    main, env = deform_scene(scene, t)
    buffers = render(main, camera, render_settings, workers)
    h, w = camera.height, camera.width
    traced = buffers.mask(render_settings.alpha_mask_threshold)
    specular_image = np.zeros((h, w, 3))

    if not specular or not traced.any():
        return HybridFrame(buffers.diffuse, buffers, specular_image, np.zeros((h, w), dtype=bool), main, env)

    if epsilon is None:
        epsilon = resolve_epsilon(trace_settings, scene.main, scene.env)
    ids = np.flatnonzero(traced.ravel())
    rest = np.flatnonzero(~traced.ravel())
    origins, directions = reflection_rays(camera, buffers.depth, buffers.normal, ids, epsilon)
    result = trace_specular(origins, directions, env, build_bvh(env, trace_settings), trace_settings, t_min=epsilon)

    diffuse = ad.reshape(buffers.diffuse, (-1, 3))
    alpha_spec = ad.reshape(buffers.alpha_spec, (-1,))
    mixed = blend(ad.getitem(diffuse, ids), result.color, ad.getitem(alpha_spec, ids))
    image = ad.assemble([mixed, ad.getitem(diffuse, rest)], [ids, rest], h * w)
    specular_image.reshape(-1, 3)[ids] = np.asarray(ad.value(result.color))
    return HybridFrame(ad.reshape(image, (h, w, 3)), buffers, specular_image, traced, main, env)


def oracle_render_hybrid(
    scene: Scene,
    t: float,
    camera: Camera,
    render_settings: Optional[RenderSettings] = None,
    trace_settings: Optional[TraceSettings] = None,
    epsilon: Optional[float] = None,
) -> np.ndarray:
    """
    End-to-end reference: brute-force rasterization, per-pixel exhaustive
    tracing with k equal to the environment size and a plain blend loop.
    """
    render_settings = render_settings or RenderSettings()
    trace_settings = trace_settings or TraceSettings()
    scene = scene.detached()
    main, env = deform_scene(scene, t)
    buffers = oracle_render(main, camera, render_settings)
    image = np.array(buffers.diffuse)
    traced = buffers.mask(render_settings.alpha_mask_threshold)
    if not traced.any():
        return image

    if epsilon is None:
        epsilon = resolve_epsilon(trace_settings, scene.main, scene.env)
    exhaustive = trace_settings.copy(update={"k": max(env.count, 1)})
    inverse = inverse_affines(env)
    origin = camera.origin
    directions = camera.ray_directions()
    for y, x in zip(*np.nonzero(traced)):
        d = directions[y, x]
        n = buffers.normal[y, x]
        if float(n @ d) > 0.0:
            n = -n
        surface = origin + buffers.depth[y, x] * d + epsilon * n
        out = d - 2.0 * float(d @ n) * n
        out = out / np.linalg.norm(out)
        # early_stop also ends this loop, so the traced color differs from the untruncated
        # sum by at most early_stop * max|c|; blending scales that by alpha_spec <= 1.
        color = brute_force_trace(Ray(surface, out, t_min=epsilon), env, exhaustive, inverse).color
        a = buffers.alpha_spec[y, x]
        image[y, x] = (1.0 - a) * buffers.diffuse[y, x] + a * color
    return image
