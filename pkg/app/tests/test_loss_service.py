"""
Loss Service Tests
==================

Photometric, SSIM and normal terms, and the phase-gated total loss.
"""

import numpy as np
import pytest

from app.config import LossWeights, Phase
from app.core import autodiff as ad
from app.core.exceptions import LossError
from app.services.loss_service import normal_consistency, photometric, ssim, tc_normal, total_loss
from app.services.raster_service import render


class TestImageTerms:
    """L1 and SSIM."""

    def test_photometric(self):
        a = np.zeros((2, 2, 3))
        b = np.full((2, 2, 3), 0.25)
        b[0, 0] = 1.0
        assert photometric(a, b) == pytest.approx((9 * 0.25 + 3 * 1.0) / 12)

    def test_ssim_identity_is_exact(self, rng):
        image = rng.uniform(size=(17, 13, 3))
        assert float(ssim(image, image)) == 1.0

    def test_ssim_symmetric_and_decreasing(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        slightly = np.clip(a + rng.normal(0.0, 0.02, size=a.shape), 0.0, 1.0)
        heavily = np.clip(a + rng.normal(0.0, 0.3, size=a.shape), 0.0, 1.0)
        assert float(ssim(a, slightly)) == pytest.approx(float(ssim(slightly, a)), abs=1e-12)
        assert float(ssim(a, heavily)) < float(ssim(a, slightly)) < 1.0

    def test_ssim_gradient(self, rng):
        gt = rng.uniform(size=(9, 8, 3))
        report = ad.grad_check(lambda p: ssim(p["x"], gt), {"x": rng.uniform(size=(9, 8, 3))}, max_entries=25)
        assert report.passed(1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            photometric(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
        with pytest.raises(LossError):
            ssim(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


class TestNormalTerms:
    """Masked mean misalignment 1 - n . target."""

    def test_aligned_and_opposite(self):
        n = np.tile([0.0, 0.0, 1.0], (3, 3, 1))
        mask = np.ones((3, 3), dtype=bool)
        assert float(normal_consistency(n, n, mask)) == pytest.approx(0.0)
        assert float(tc_normal(n, -n, mask)) == pytest.approx(2.0)

    def test_mask_selects_pixels(self):
        n = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
        target = n.copy()
        target[0, 0] = [1.0, 0.0, 0.0]
        mask = np.array([[True, True], [False, False]])
        assert float(tc_normal(n, target, mask)) == pytest.approx(0.5)

    def test_empty_mask_is_zero(self):
        n = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
        assert normal_consistency(n, -n, np.zeros((2, 2), dtype=bool)) == 0.0


class TestTotalLoss:
    """Weighted sum supervised by the phase's image."""

    def test_diffuse_phase_supervises_diffuse_buffer(self, main_splats, camera, rng):
        buffers = render(main_splats, camera)
        gt = rng.uniform(size=(camera.height, camera.width, 3))
        weights = LossWeights(lambda_ssim=0.0, lambda_norm=0.0, lambda_tcnorm=0.0)
        report = total_loss(buffers, gt, weights, Phase.DIFFUSE, camera)
        assert report.total == pytest.approx(float(np.abs(buffers.diffuse - gt).mean()))
        assert (report.ssim_term, report.l_norm, report.l_tcnorm) == (0.0, 0.0, 0.0)

    def test_weighted_sum(self, main_splats, camera, rng):
        buffers = render(main_splats, camera)
        gt = rng.uniform(size=(camera.height, camera.width, 3))
        external = (np.tile([0.0, 0.0, 1.0], (camera.height, camera.width, 1)), np.ones((camera.height, camera.width), dtype=bool))
        weights = LossWeights()
        report = total_loss(buffers, gt, weights, Phase.JOINT, camera, buffers.diffuse, external)
        expected = (
            report.photometric
            + weights.lambda_ssim * report.ssim_term
            + weights.lambda_norm * report.l_norm
            + weights.lambda_tcnorm * report.l_tcnorm
        )
        assert report.total == pytest.approx(expected)
        assert float(report.objective) == pytest.approx(report.total)
        assert report.first_non_finite() is None
        assert report.pixels["photometric"] == camera.pixel_count

    def test_hybrid_required_outside_diffuse_phase(self, main_splats, camera):
        buffers = render(main_splats, camera)
        gt = np.zeros((camera.height, camera.width, 3))
        with pytest.raises(LossError):
            total_loss(buffers, gt, LossWeights(), Phase.SPECULAR, camera)

    def test_resolution_mismatch(self, main_splats, camera):
        buffers = render(main_splats, camera)
        with pytest.raises(LossError):
            total_loss(buffers, np.zeros((4, 4, 3)), LossWeights(), Phase.DIFFUSE, camera)

    def test_normal_term_needs_camera(self, main_splats, camera):
        buffers = render(main_splats, camera)
        gt = np.zeros((camera.height, camera.width, 3))
        with pytest.raises(LossError):
            total_loss(buffers, gt, LossWeights(), Phase.DIFFUSE)
