"""
Loss Service
============

Training objectives, all written with autodiff primitives:
- L1 photometric error
- SSIM with an 11x11 Gaussian window (sigma 1.5), reflect-padded
- Normal consistency between rendered normals and depth pseudo-normals
- Supervision of rendered normals by external normal maps
- Phase-gated weighted total with a per-term report
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.ndimage import binary_erosion, correlate1d

from app.config import LossWeights, Phase
from app.core import autodiff as ad
from app.core.exceptions import LossError
from app.core.logging import get_logger
from app.models.buffers import RenderBuffers
from app.models.camera import Camera
from app.services.raster_service import pseudo_normals_from_depth

logger = get_logger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_same_shape(a: "ad.ArrayLike", b: "ad.ArrayLike", what: str) -> None:
    sa, sb = np.shape(ad.value(a)), np.shape(ad.value(b))
    if sa != sb:
        raise LossError(f"{what}: shape {sa} does not match {sb}")


def photometric(pred: "ad.ArrayLike", gt: np.ndarray) -> "ad.ArrayLike":
    """Mean absolute error over pixels and channels."""
    _check_same_shape(pred, gt, "photometric")
    return ad.mean(ad.abs_(pred - gt))


@lru_cache(maxsize=32)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


@lru_cache(maxsize=32)
def window_matrix(length: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """(length, length) matrix applying the 1-D window with mirrored borders."""
    matrix = correlate1d(np.eye(length), gaussian_window(size, sigma), axis=0, mode="reflect")
    matrix.setflags(write=False)
    return matrix


def ssim(a: "ad.ArrayLike", b: "ad.ArrayLike") -> "ad.ArrayLike":
    """
    Mean SSIM of two (H, W, 3) images in [0, 1].

    ssim(x, x) is exactly 1: the numerator and denominator are built from
    identical products when both inputs coincide.
    """
    _check_same_shape(a, b, "ssim")
    shape = np.shape(ad.value(a))
    if len(shape) == 2:
        a = ad.reshape(a, shape + (1,))
        b = ad.reshape(b, shape + (1,))
        shape = shape + (1,)
    rows, cols = window_matrix(shape[0]), window_matrix(shape[1])

    def blur(x):
        return ad.filter2d(x, rows, cols)

    mu1, mu2 = blur(a), blur(b)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = blur(a * a) - mu1_sq
    sigma2_sq = blur(b * b) - mu2_sq
    sigma12 = blur(a * b) - mu12
    numerator = (2.0 * mu12 + SSIM_C1) * (2.0 * sigma12 + SSIM_C2)
    denominator = (mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2)
    return ad.mean(numerator / denominator)


def _masked_mean_misalignment(normals: "ad.ArrayLike", targets: np.ndarray, mask: np.ndarray) -> Tuple["ad.ArrayLike", int]:
    _check_same_shape(normals, targets, "normal loss")
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0
    per_pixel = ad.where(mask, 1.0 - ad.dot(normals, targets), 0.0)
    return ad.sum_(per_pixel) / float(count), count


def normal_consistency(normals: "ad.ArrayLike", pseudo: "ad.ArrayLike", mask: np.ndarray) -> "ad.ArrayLike":
    """Mean of 1 - n . N_d over masked pixels (0 when the mask is empty)."""
    return _masked_mean_misalignment(normals, pseudo, mask)[0]


def tc_normal(normals: "ad.ArrayLike", external: np.ndarray, mask: np.ndarray) -> "ad.ArrayLike":
    """Mean of 1 - n . N_e over masked pixels (0 when the mask is empty)."""
    return _masked_mean_misalignment(normals, external, mask)[0]


@dataclass
class LossReport:
    """Scalar terms of one evaluation; `objective` keeps the taped total."""

    total: float
    photometric: float
    ssim_term: float
    l_norm: float
    l_tcnorm: float
    pixels: Dict[str, int] = field(default_factory=dict)
    objective: "ad.ArrayLike" = 0.0

    def terms(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "photometric": self.photometric,
            "ssim_term": self.ssim_term,
            "l_norm": self.l_norm,
            "l_tcnorm": self.l_tcnorm,
        }

    def first_non_finite(self) -> Optional[str]:
        """Offending component term; "total" only when every component is finite."""
        terms = self.terms()
        total = terms.pop("total")
        for name, value in terms.items():
            if not np.isfinite(value):
                return name
        return None if np.isfinite(total) else "total"


def surface_mask(buffers: RenderBuffers, threshold: float) -> np.ndarray:
    return np.asarray(ad.value(buffers.alpha)) > threshold


def total_loss(
    buffers: RenderBuffers,
    gt: np.ndarray,
    weights: LossWeights,
    phase: Phase,
    camera: Optional[Camera] = None,
    hybrid: Optional["ad.ArrayLike"] = None,
    external: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> LossReport:
    """
    photometric + l_ssim (1 - ssim) / 2 + l_norm L_norm + l_tc L_tcnorm.

    The supervised image is the diffuse buffer in the diffuse phase and the
    hybrid image otherwise. The normal-consistency term needs `camera` to
    back-project depth and skips pixels whose neighbours are off-surface;
    the external term is skipped when no normal map is given.

    Raises:
        LossError: mismatched resolutions, or a hybrid image missing outside
            the diffuse phase
    """
    gt = np.asarray(gt, dtype=np.float64)
    if phase == Phase.DIFFUSE:
        image = buffers.diffuse
    elif hybrid is None:
        raise LossError(f"phase '{phase.value}' supervises the hybrid image, none given")
    else:
        image = hybrid
    _check_same_shape(image, gt, "supervised image")

    l1 = photometric(image, gt)
    objective = l1
    pixels = {"photometric": int(gt.shape[0] * gt.shape[1])}
    ssim_term = l_norm = l_tc = 0.0

    if weights.lambda_ssim > 0.0:
        ssim_term = (1.0 - ssim(image, gt)) * 0.5
        objective = objective + weights.lambda_ssim * ssim_term

    covered = surface_mask(buffers, weights.normal_mask_threshold)
    if weights.lambda_norm > 0.0:
        if camera is None:
            raise LossError("normal consistency needs the camera to back-project depth")
        pseudo, valid = pseudo_normals_from_depth(buffers.depth, camera)
        interior = binary_erosion(covered, structure=np.ones((3, 3), dtype=bool), border_value=1)
        mask = interior & valid
        l_norm, pixels["l_norm"] = _masked_mean_misalignment(buffers.normal, pseudo, mask)
        objective = objective + weights.lambda_norm * l_norm

    if external is not None and weights.lambda_tcnorm > 0.0:
        normals_e, valid_e = external
        mask = covered & np.asarray(valid_e, dtype=bool)
        l_tc, pixels["l_tcnorm"] = _masked_mean_misalignment(buffers.normal, np.asarray(normals_e), mask)
        objective = objective + weights.lambda_tcnorm * l_tc

    values = [float(ad.value(x)) for x in (l1, ssim_term, l_norm, l_tc)]
    total = values[0] + weights.lambda_ssim * values[1] + weights.lambda_norm * values[2] + weights.lambda_tcnorm * values[3]
    return LossReport(
        total=total,
        photometric=values[0],
        ssim_term=values[1],
        l_norm=values[2],
        l_tcnorm=values[3],
        pixels=pixels,
        objective=objective,
    )
