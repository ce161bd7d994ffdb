"""
Check Service Tests
===================

The acceptance suites at reduced sizes, and the naive reference metrics.
"""

import numpy as np
import pandas as pd
import pytest

from app.services.check_service import (
    DEFAULT_SUITES,
    QUICK_SIZES,
    SUITES,
    BenchSizes,
    acceptance_verdict,
    frames_per_second,
    naive_psnr,
    naive_ssim,
    random_scene,
    run_benchmark,
    run_checks,
)
from app.services.metrics_service import psnr, ssim_score


class TestSuites:
    """Quick suites pass on a correct pipeline."""

    @pytest.mark.parametrize("name", ["reflection", "metrics", "raster_oracle", "tracer_oracle", "hybrid_oracle"])
    def test_quick_suite_passes(self, name):
        (result,) = run_checks(QUICK_SIZES, [name])
        assert result.name == name
        assert result.passed, result.detail
        assert result.seconds >= 0.0

    def test_suite_registry(self):
        assert set(SUITES) == {
            "reflection", "raster_oracle", "tracer_oracle", "hybrid_oracle", "gradients", "schedule", "metrics",
            "acceptance",
        }
        assert "acceptance" not in DEFAULT_SUITES
        assert set(DEFAULT_SUITES) == set(SUITES) - {"acceptance"}


class TestNaiveMetrics:
    """Loop implementations agree with the vectorized ones."""

    def test_agree(self, rng):
        a = rng.uniform(size=(20, 18, 3))
        b = np.clip(a + rng.normal(0.0, 0.1, size=a.shape), 0.0, 1.0)
        assert naive_psnr(a, b) == pytest.approx(psnr(a, b), abs=1e-9)
        assert naive_ssim(a, b) == pytest.approx(ssim_score(a, b), abs=1e-9)
        assert naive_psnr(a, a) == 99.0


class TestRandomScenes:
    """Generators used by the suites produce valid sets."""

    def test_random_scene(self, rng):
        scene = random_scene(rng, 5, 3)
        assert (scene.n_main, scene.n_env) == (5, 3)
        scene.main.validate("main")
        scene.env.validate("env")
        assert scene.env.tint_logit is None


class TestBenchmark:
    """Stage timings of a small scene."""

    def test_stages(self):
        table = run_benchmark(BenchSizes(n_main=8, n_env=6, resolution=12, repeats=1))
        assert set(table["stage"]) == {"deform", "rasterize", "bvh_build", "trace", "blend", "hybrid_frame", "train_step"}
        assert (table["ms"] >= 0.0).all()
        assert frames_per_second(table) > 0.0


def ablation_table(full_psnr, diffuse_psnr, full_error, no_normals_error) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {"variant": "full", "psnr": full_psnr, "normal_error_deg": full_error},
            {"variant": "diffuse_only", "psnr": diffuse_psnr, "normal_error_deg": 30.0},
            {"variant": "no_normal_losses", "psnr": full_psnr, "normal_error_deg": no_normals_error},
        ]
    )


class TestAcceptance:
    """End-to-end ablation thresholds: +2 dB from the specular branch, -20% normal error from the normal losses."""

    def test_both_criteria_met(self):
        passed, detail = acceptance_verdict(ablation_table(24.5, 22.0, 12.0, 16.0))
        assert passed, detail
        assert "+2.50 dB" in detail
        assert "25.0% lower" in detail

    def test_small_psnr_gain_fails(self):
        passed, detail = acceptance_verdict(ablation_table(23.5, 22.0, 12.0, 16.0))
        assert not passed
        assert "specular FAIL" in detail
        assert "normals ok" in detail

    def test_small_normal_improvement_fails(self):
        passed, detail = acceptance_verdict(ablation_table(25.0, 22.0, 14.0, 16.0))
        assert not passed
        assert "normals FAIL" in detail

    def test_missing_normal_error_fails(self):
        passed, _ = acceptance_verdict(ablation_table(25.0, 22.0, float("nan"), 16.0))
        assert not passed

    def test_quick_run_reports_both_criteria(self):
        (result,) = run_checks(QUICK_SIZES, ["acceptance"])
        assert result.name == "acceptance"
        assert result.detail.startswith(f"{QUICK_SIZES.acceptance_steps} steps;")
        assert "dB" in result.detail and "deg" in result.detail
