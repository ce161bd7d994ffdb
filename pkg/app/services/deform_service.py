"""
Deformation Service
===================

Time-conditioned residual networks applied to canonical splats.

The input of each network is the positional encoding of the canonical
center and of the time; its output is a raw-parameter residual that is
added to the canonical splat. Output columns:

    main: dp 0:3, ds 3:5, dr 5:9, do 9, dtint 10
    env:  dp 0:3, ds 3:5, dr 5:9, do 9
"""

from typing import Tuple

import numpy as np

from app.core import autodiff as ad
from app.core.exceptions import DeformError
from app.core.logging import get_logger
from app.models.deformation import MAIN, DeformationField, ResidualTuple
from app.models.scene import Scene
from app.models.splat import SplatSet

logger = get_logger(__name__)

QUAT_FALLBACK_NORM = 1e-9


def positional_encode(x: "ad.ArrayLike", freqs: int) -> "ad.ArrayLike":
    """
    [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]
    along the last axis; width n (2L + 1).
    """
    parts = [x]
    for level in range(freqs):
        scaled = (2.0 ** level * np.pi) * x
        parts += [ad.sin(scaled), ad.cos(scaled)]
    return ad.concat(parts, axis=-1) if freqs else x


def eval_deform(field: DeformationField, centers: "ad.ArrayLike", t: float) -> ResidualTuple:
    """
    Residuals of the splats whose canonical centers are given (rows of (N, 3)).

    Raises:
        DeformError: t outside [0, 1]
    """
    if not 0.0 <= t <= 1.0:
        raise DeformError(f"time {t} outside [0, 1]")
    n = int(np.shape(ad.value(centers))[0])
    encoded_p = positional_encode(centers, field.pos_freqs)
    encoded_t = positional_encode(np.full((n, 1), float(t)), field.time_freqs)
    h = ad.concat([encoded_p, encoded_t], axis=1)

    last = len(field.weights) - 1
    for i, (w, b) in enumerate(zip(field.weights, field.biases)):
        h = ad.matmul(h, w) + b
        if i < last:
            h = ad.relu(h)

    def cols(start: int, stop: int) -> "ad.ArrayLike":
        return ad.getitem(h, (slice(None), slice(start, stop)))

    return ResidualTuple(
        dp=cols(0, 3),
        ds=cols(3, 5),
        dr=cols(5, 9),
        do_=ad.getitem(h, (slice(None), 9)),
        dtint=ad.getitem(h, (slice(None), 10)) if field.kind == MAIN else None,
    )


def _deformed_rotation(rotation: "ad.ArrayLike", dr: "ad.ArrayLike") -> "ad.ArrayLike":
    """normalize(r + dr); rows with dr == 0 keep r bit-exactly, near-zero sums fall back to r."""
    moved = rotation + dr
    fallback = np.linalg.norm(np.asarray(ad.value(moved)), axis=-1) < QUAT_FALLBACK_NORM
    unit = ad.where(fallback[:, None], rotation, ad.normalize(moved))
    unchanged = (np.asarray(ad.value(dr)) == 0.0).all(axis=-1) | fallback
    if not unchanged.any():
        return unit
    exact = np.where(unchanged[:, None], np.asarray(ad.value(rotation)), np.asarray(ad.value(unit)))
    return ad.replace_value(unit, exact)


def apply_residuals(splats: SplatSet, residual: ResidualTuple) -> SplatSet:
    """
    Add residuals in raw parameter space.

    Raises:
        DeformError: a residual or deformed parameter is not finite
    """
    if not residual.is_finite():
        raise DeformError("residual network produced non-finite values")
    deformed = SplatSet(
        center=splats.center + residual.dp,
        rotation=_deformed_rotation(splats.rotation, residual.dr),
        log_scale=splats.log_scale + residual.ds,
        opacity_logit=splats.opacity_logit + residual.do_,
        sh_coeffs=splats.sh_coeffs,
        tint_logit=None if splats.tint_logit is None else splats.tint_logit + residual.dtint,
    )
    for name in ("center", "rotation", "log_scale", "opacity_logit", "tint_logit"):
        value = getattr(deformed, name)
        if value is not None and not np.isfinite(ad.value(value)).all():
            raise DeformError(f"deformed {name} is not finite")
    return deformed


def deform_splats(splats: SplatSet, field: DeformationField, t: float) -> SplatSet:
    if splats.count == 0:
        if not 0.0 <= t <= 1.0:
            raise DeformError(f"time {t} outside [0, 1]")
        return splats
    return apply_residuals(splats, eval_deform(field, splats.center, t))


def deform_scene(scene: Scene, t: float) -> Tuple[SplatSet, SplatSet]:
    """Main and environment splats at time t, each warped by its own field."""
    return deform_splats(scene.main, scene.main_field, t), deform_splats(scene.env, scene.env_field, t)
