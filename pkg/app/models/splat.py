"""
Splat models
============

Raw-parameter storage for the main-content and environment splats.

Parameters are kept unactivated (logits, log-scales, quaternions) so that
additive residuals can never leave the valid range. A `SplatSet` stores a
whole collection as arrays; its fields may be `Var`s while training.
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Union

import numpy as np

from app.core import autodiff as ad
from app.core.exceptions import SceneValidationError

QUAT_TOLERANCE = 1e-9
SCALE_FLOOR = 1e-6


def sh_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_of(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if sh_count(degree) != count or not 0 <= degree <= 2:
        raise ValueError(f"{count} SH coefficients per channel is not a degree 0..2 layout")
    return degree


@dataclass
class EnvSplat:
    """One environment Gaussian."""

    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # (K, 3)


@dataclass
class SplatPrimitive(EnvSplat):
    """One 2D Gaussian of the main content (environment splat plus specular tint)."""

    tint_logit: float = 0.0


@dataclass
class SplatSet:
    """A collection of splats as arrays; `tint_logit` is None for environment sets."""

    center: "ad.ArrayLike"
    rotation: "ad.ArrayLike"
    log_scale: "ad.ArrayLike"
    opacity_logit: "ad.ArrayLike"
    sh_coeffs: "ad.ArrayLike"
    tint_logit: Optional["ad.ArrayLike"] = None

    @property
    def count(self) -> int:
        return int(np.shape(ad.value(self.center))[0])

    def __len__(self) -> int:
        return self.count

    @property
    def has_tint(self) -> bool:
        return self.tint_logit is not None

    @property
    def sh_degree(self) -> int:
        return sh_degree_of(np.shape(ad.value(self.sh_coeffs))[1])

    @property
    def scales(self) -> "ad.ArrayLike":
        """exp(log_scale), floored at 1e-6 world units."""
        return ad.clamp(ad.exp(self.log_scale), SCALE_FLOOR)

    @property
    def opacity(self) -> "ad.ArrayLike":
        return ad.sigmoid(self.opacity_logit)

    @property
    def tint(self) -> "ad.ArrayLike":
        if self.tint_logit is None:
            return np.zeros(self.count)
        return ad.sigmoid(self.tint_logit)

    @classmethod
    def empty(cls, sh_degree: int = 0, with_tint: bool = False) -> "SplatSet":
        return cls(
            center=np.zeros((0, 3)),
            rotation=np.zeros((0, 4)),
            log_scale=np.zeros((0, 2)),
            opacity_logit=np.zeros(0),
            sh_coeffs=np.zeros((0, sh_count(sh_degree), 3)),
            tint_logit=np.zeros(0) if with_tint else None,
        )

    @classmethod
    def from_primitives(cls, splats: Sequence[Union[EnvSplat, SplatPrimitive]], sh_degree: int = 0) -> "SplatSet":
        if not splats:
            return cls.empty(sh_degree)
        with_tint = isinstance(splats[0], SplatPrimitive)
        return cls(
            center=np.array([s.center for s in splats], dtype=np.float64),
            rotation=np.array([s.rotation for s in splats], dtype=np.float64),
            log_scale=np.array([s.log_scale for s in splats], dtype=np.float64),
            opacity_logit=np.array([s.opacity_logit for s in splats], dtype=np.float64),
            sh_coeffs=np.array([s.sh_coeffs for s in splats], dtype=np.float64),
            tint_logit=np.array([s.tint_logit for s in splats], dtype=np.float64) if with_tint else None,
        )

    def primitive(self, i: int) -> Union[EnvSplat, SplatPrimitive]:
        """Single splat `i` as a value object (numpy values)."""
        common = dict(
            center=np.array(ad.value(self.center)[i]),
            rotation=np.array(ad.value(self.rotation)[i]),
            log_scale=np.array(ad.value(self.log_scale)[i]),
            opacity_logit=float(ad.value(self.opacity_logit)[i]),
            sh_coeffs=np.array(ad.value(self.sh_coeffs)[i]),
        )
        if self.has_tint:
            return SplatPrimitive(tint_logit=float(ad.value(self.tint_logit)[i]), **common)
        return EnvSplat(**common)

    def primitives(self) -> List[Union[EnvSplat, SplatPrimitive]]:
        return [self.primitive(i) for i in range(self.count)]

    def detached(self) -> "SplatSet":
        """Plain numpy copy of every field."""
        return SplatSet(
            center=np.array(ad.value(self.center), dtype=np.float64),
            rotation=np.array(ad.value(self.rotation), dtype=np.float64),
            log_scale=np.array(ad.value(self.log_scale), dtype=np.float64),
            opacity_logit=np.array(ad.value(self.opacity_logit), dtype=np.float64),
            sh_coeffs=np.array(ad.value(self.sh_coeffs), dtype=np.float64),
            tint_logit=None if self.tint_logit is None else np.array(ad.value(self.tint_logit), dtype=np.float64),
        )

    def subset(self, keep: np.ndarray) -> "SplatSet":
        """Rows selected by a boolean mask or index array (numpy values only)."""
        base = self.detached()
        return SplatSet(
            center=base.center[keep],
            rotation=base.rotation[keep],
            log_scale=base.log_scale[keep],
            opacity_logit=base.opacity_logit[keep],
            sh_coeffs=base.sh_coeffs[keep],
            tint_logit=None if base.tint_logit is None else base.tint_logit[keep],
        )

    def with_fields(self, **changes) -> "SplatSet":
        return replace(self, **changes)

    def validate(self, kind: str) -> None:
        """
        Check every declared invariant, naming the first offending splat.

        Raises:
            SceneValidationError: kind, splat index and field of the violation
        """
        base = self.detached()
        n = base.count
        shapes = {
            "center": (n, 3),
            "rotation": (n, 4),
            "log_scale": (n, 2),
            "opacity_logit": (n,),
        }
        for name, shape in shapes.items():
            if getattr(base, name).shape != shape:
                raise SceneValidationError(kind, None, name, f"expected shape {shape}")
        if base.sh_coeffs.ndim != 3 or base.sh_coeffs.shape[0] != n or base.sh_coeffs.shape[2] != 3:
            raise SceneValidationError(kind, None, "sh_coeffs", "expected shape (n, K, 3)")
        try:
            sh_degree_of(base.sh_coeffs.shape[1])
        except ValueError as e:
            raise SceneValidationError(kind, None, "sh_coeffs", str(e)) from e
        if base.tint_logit is not None and base.tint_logit.shape != (n,):
            raise SceneValidationError(kind, None, "tint_logit", f"expected shape {(n,)}")

        for name in ("center", "rotation", "log_scale", "opacity_logit", "sh_coeffs", "tint_logit"):
            arr = getattr(base, name)
            if arr is None:
                continue
            bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1) if n else np.zeros(0, dtype=bool)
            if bad.any():
                raise SceneValidationError(kind, int(np.argmax(bad)), name, "non-finite value")

        if n:
            norms = np.linalg.norm(base.rotation, axis=1)
            bad = np.abs(norms - 1.0) > QUAT_TOLERANCE
            if bad.any():
                i = int(np.argmax(bad))
                raise SceneValidationError(kind, i, "rotation", f"quaternion norm {norms[i]!r} is not 1")
            scales = np.exp(base.log_scale)
            bad = ~(scales > 0.0).all(axis=1)
            if bad.any():
                raise SceneValidationError(kind, int(np.argmax(bad)), "log_scale", "scale underflows to zero")
