"""
Metrics Service Tests
=====================

PSNR, SSIM, angular error, the held-out split and directory evaluation.
"""

import json

import numpy as np
import pytest

from app.core.exceptions import ImageFormatError
from app.services.image_service import save_image
from app.services.metrics_service import (
    PSNR_CAP,
    evaluate_directories,
    format_report,
    mean_angular_error,
    psnr,
    split_frames,
    ssim_score,
)


@pytest.fixture
def image_dirs(tmp_path, rng):
    gt = tmp_path / "gt"
    renders = tmp_path / "renders"
    for i in range(3):
        image = rng.uniform(size=(16, 16, 3)).astype(np.float32)
        save_image(image, gt / f"frame_{i:03d}.pfm")
        save_image(image, renders / f"frame_{i:03d}.pfm")
    return renders, gt


class TestImageMetrics:
    """PSNR and SSIM."""

    def test_psnr_identical_is_capped(self, rng):
        image = rng.uniform(size=(8, 8, 3))
        assert psnr(image, image) == PSNR_CAP == 99.0

    def test_psnr_uniform_error(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 3, 3)))

    def test_ssim_identical(self, rng):
        image = rng.uniform(size=(16, 16, 3))
        assert ssim_score(image, image) == 1.0


class TestAngularError:
    """Mean angle between normal maps in degrees."""

    def test_right_angle(self):
        pred = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
        gt = np.tile([0.0, 2.0, 0.0], (2, 2, 1))
        assert mean_angular_error(pred, gt) == pytest.approx(90.0)
        assert mean_angular_error(pred, pred) == pytest.approx(0.0, abs=1e-6)

    def test_zero_normals_and_mask_skip_pixels(self):
        pred = np.tile([0.0, 0.0, 1.0], (1, 2, 1))
        gt = pred.copy()
        gt[0, 1] = [0.0, 0.0, -1.0]
        assert mean_angular_error(pred, gt, np.array([[True, False]])) == pytest.approx(0.0, abs=1e-6)
        gt[0, 0] = 0.0
        assert np.isnan(mean_angular_error(pred, gt, np.array([[True, False]])))


class TestSplit:
    """Every eighth frame is held out."""

    def test_split(self):
        train, test = split_frames(17)
        assert test == [0, 8, 16]
        assert len(train) == 14
        assert not set(train) & set(test)

    def test_tiny_dataset(self):
        assert split_frames(2) == ([1], [0])


class TestEvaluateDirectories:
    """Paired evaluation of render and ground-truth directories."""

    def test_identical_directories(self, image_dirs):
        renders, gt = image_dirs
        report = evaluate_directories(renders, gt, workers=2)
        assert [f.name for f in report.frames] == ["frame_000", "frame_001", "frame_002"]
        assert report.mean_psnr == PSNR_CAP
        assert report.mean_ssim == 1.0
        assert "mean" in format_report(report)

    def test_recorded_timings(self, image_dirs):
        renders, gt = image_dirs
        timings = {"frame_000": 10.0, "frame_001": 20.0, "frame_002": 30.0}
        (renders / "timings.json").write_text(json.dumps(timings))
        report = evaluate_directories(renders, gt)
        assert report.ms_per_frame == pytest.approx(20.0)

    def test_missing_render(self, image_dirs):
        renders, gt = image_dirs
        (renders / "frame_001.pfm").unlink()
        with pytest.raises(FileNotFoundError):
            evaluate_directories(renders, gt)

    def test_missing_directory(self, tmp_path, image_dirs):
        _, gt = image_dirs
        with pytest.raises(FileNotFoundError):
            evaluate_directories(tmp_path / "nowhere", gt)

    def test_size_mismatch(self, image_dirs):
        renders, gt = image_dirs
        save_image(np.zeros((8, 8, 3)), renders / "frame_002.pfm")
        with pytest.raises(ImageFormatError):
            evaluate_directories(renders, gt)

    def test_empty_ground_truth(self, tmp_path, image_dirs):
        renders, _ = image_dirs
        (tmp_path / "empty").mkdir()
        with pytest.raises(ImageFormatError):
            evaluate_directories(renders, tmp_path / "empty")
