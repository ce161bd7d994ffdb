"""
Deformation Service Tests
=========================

Positional encoding, residual networks and their application to splats.
"""

import numpy as np
import pytest

from app.config import DeformConfig
from app.core.exceptions import DeformError
from app.models.deformation import ENV, MAIN, DeformationField
from app.models.scene import Scene
from app.models.splat import SplatSet
from app.services.check_service import random_field
from app.services.deform_service import deform_scene, deform_splats, eval_deform, positional_encode

SMALL = DeformConfig(pos_freqs=3, time_freqs=2, hidden_layers=2, hidden_width=16)


def small_field(kind, rng=None):
    return DeformationField.create(kind, SMALL.pos_freqs, SMALL.time_freqs, SMALL.hidden_layers, SMALL.hidden_width, rng)


class TestPositionalEncoding:
    """Sin/cos features at octave frequencies."""

    def test_values(self):
        encoded = positional_encode(np.array([[0.25]]), 2)
        np.testing.assert_allclose(
            encoded, [[0.25, np.sin(0.25 * np.pi), np.cos(0.25 * np.pi), np.sin(0.5 * np.pi), np.cos(0.5 * np.pi)]]
        )

    def test_width(self, rng):
        assert positional_encode(rng.normal(size=(7, 3)), 6).shape == (7, 39)
        assert positional_encode(rng.normal(size=(7, 1)), 0).shape == (7, 1)


class TestResidualField:
    """Network shapes and outputs."""

    def test_layer_shapes(self):
        field = small_field(MAIN)
        assert field.input_width == 3 * 7 + 5
        assert field.layer_shapes == [(26, 16), (16, 16), (16, 11)]
        assert field.hidden_widths == [16, 16]
        assert small_field(ENV).output_width == 10
        field.check_shapes()

    def test_fresh_field_is_identity(self, main_splats):
        field = small_field(MAIN, np.random.default_rng(3))
        deformed = deform_splats(main_splats, field, 0.6)
        for name in ("center", "rotation", "log_scale", "opacity_logit", "tint_logit"):
            np.testing.assert_array_equal(getattr(deformed, name), getattr(main_splats, name))

    def test_environment_has_no_tint_residual(self, env_splats, rng):
        residual = eval_deform(random_field(rng, ENV, SMALL), env_splats.center, 0.3)
        assert residual.dtint is None
        assert residual.dp.shape == (env_splats.count, 3)
        assert residual.dr.shape == (env_splats.count, 4)

    def test_time_outside_unit_interval(self, main_splats):
        field = small_field(MAIN)
        for t in (-0.1, 1.5):
            with pytest.raises(DeformError):
                deform_splats(main_splats, field, t)
        with pytest.raises(DeformError):
            deform_splats(SplatSet.empty(0, with_tint=True), field, 2.0)

    def test_residuals_move_splats(self, main_splats, rng):
        field = random_field(rng, MAIN, SMALL, head_scale=0.05)
        early = deform_splats(main_splats, field, 0.0)
        late = deform_splats(main_splats, field, 1.0)
        assert not np.allclose(early.center, late.center)
        np.testing.assert_allclose(np.linalg.norm(late.rotation, axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(late.sh_coeffs, main_splats.sh_coeffs)

    def test_non_finite_residual(self, main_splats):
        field = small_field(MAIN)
        field.biases[-1] = np.full(11, np.nan)
        with pytest.raises(DeformError):
            deform_splats(main_splats, field, 0.5)

    def test_scene_uses_separate_fields(self, main_splats, env_splats, rng):
        scene = Scene(main_splats, env_splats, random_field(rng, MAIN, SMALL, head_scale=0.05), small_field(ENV))
        main, env = deform_scene(scene, 0.5)
        assert not np.allclose(main.center, main_splats.center)
        np.testing.assert_array_equal(env.center, env_splats.center)
        np.testing.assert_array_equal(env.rotation, env_splats.rotation)
