"""
Splat Service Tests
===================

Tangent frames, ray/splat intersection, reflection, SH evaluation and splat packing.
"""

import numpy as np
import pytest

from app.core.utils import random_quaternions, random_unit_vectors
from app.models.ray import Ray
from app.models.splat import EnvSplat, SplatPrimitive, SplatSet
from app.services.splat_service import (
    SH_C0,
    eval_sh,
    intersect_ray_splat,
    plane_point,
    quaternion_about_axis,
    quaternion_facing,
    quaternion_multiply,
    reflect,
    rgb_to_sh_dc,
    splat_affine,
    splat_normal,
    tangent_frame,
)


def flat_splat(center=(0.0, 0.0, 0.0), scale=(0.5, 0.25), opacity_logit=0.0):
    """Splat in the z = 0 plane (identity rotation), normal +z."""
    return SplatPrimitive(
        center=np.array(center, dtype=np.float64),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        log_scale=np.log(np.array(scale)),
        opacity_logit=opacity_logit,
        sh_coeffs=np.zeros((1, 3)),
        tint_logit=0.0,
    )


class TestTangentFrame:
    """Orthonormal frames from quaternions."""

    def test_identity(self):
        t_u, t_v, t_w = tangent_frame(np.array([1.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(t_u, [1.0, 0.0, 0.0])
        np.testing.assert_allclose(t_v, [0.0, 1.0, 0.0])
        np.testing.assert_allclose(t_w, [0.0, 0.0, 1.0])

    def test_orthonormal_and_right_handed(self, rng):
        t_u, t_v, t_w = tangent_frame(random_quaternions(rng, 50))
        frames = np.stack([t_u, t_v, t_w], axis=-1)
        eye = np.einsum("nij,nik->njk", frames, frames)
        np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), eye.shape), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(frames), 1.0, atol=1e-12)

    def test_facing_quaternion(self, rng):
        normals = random_unit_vectors(rng, 40)
        normals[0] = [0.0, 0.0, -1.0]
        _, _, t_w = tangent_frame(quaternion_facing(normals))
        np.testing.assert_allclose(t_w, normals, atol=1e-12)

    def test_plane_point_and_normal(self):
        splat = flat_splat(center=(1.0, 2.0, 3.0), scale=(0.5, 0.25))
        np.testing.assert_allclose(plane_point(splat, 2.0, -4.0), [2.0, 1.0, 3.0])
        np.testing.assert_allclose(splat_normal(splat), [0.0, 0.0, 1.0])

    def test_quaternion_composition(self):
        quarter = quaternion_about_axis(np.array([0.0, 0.0, 1.0]), 0.5 * np.pi)
        half = quaternion_multiply(quarter, quarter)
        t_u, _, _ = tangent_frame(half)
        np.testing.assert_allclose(t_u, [-1.0, 0.0, 0.0], atol=1e-12)


class TestIntersection:
    """Ray / splat plane hits and the Gaussian kernel."""

    def test_head_on_hit(self):
        ray = Ray(np.array([0.25, 0.0, 2.0]), np.array([0.0, 0.0, -1.0]))
        hit = intersect_ray_splat(ray, flat_splat(), index=3)
        assert hit is not None
        assert hit.index == 3
        assert hit.depth == pytest.approx(2.0)
        assert hit.u == pytest.approx(0.5)
        assert hit.v == pytest.approx(0.0)
        assert hit.weight == pytest.approx(np.exp(-0.125))
        np.testing.assert_allclose(hit.world_point, [0.25, 0.0, 0.0])

    def test_parallel_ray_misses(self):
        ray = Ray(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
        assert intersect_ray_splat(ray, flat_splat()) is None

    def test_behind_origin_misses(self):
        ray = Ray(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]))
        assert intersect_ray_splat(ray, flat_splat()) is None

    def test_kernel_cutoff(self):
        # u = 3.5 gives G = exp(-6.125) below the default cutoff exp(-4.5)
        ray = Ray(np.array([1.75, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]))
        assert intersect_ray_splat(ray, flat_splat()) is None
        assert intersect_ray_splat(ray, flat_splat(), cutoff=0.0) is not None

    def test_t_max_bound(self):
        ray = Ray(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, -1.0]), t_max=1.5)
        assert intersect_ray_splat(ray, flat_splat()) is None

    def test_affine_maps_local_origin_to_center(self, main_splats):
        h = splat_affine(main_splats)
        np.testing.assert_allclose(h[:, :3, 3], main_splats.center)
        np.testing.assert_allclose(h[:, 3], np.tile([0.0, 0.0, 0.0, 1.0], (main_splats.count, 1)))


class TestReflection:
    """Mirror directions about unit normals."""

    def test_identities(self, rng):
        d_in = random_unit_vectors(rng, 1000)
        n = random_unit_vectors(rng, 1000)
        d_out = reflect(d_in, n)
        np.testing.assert_allclose(np.linalg.norm(d_out, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.sum(d_out * n, axis=1), -np.sum(d_in * n, axis=1), atol=1e-12)
        np.testing.assert_allclose(reflect(d_out, n), d_in, atol=1e-12)

    def test_grazing_direction_is_unchanged(self):
        d = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(reflect(d, np.array([0.0, 0.0, 1.0])), d)


class TestSphericalHarmonics:
    """Real SH evaluation with clamping."""

    def test_dc_term_is_view_independent(self, rng):
        rgb = np.array([0.2, 0.5, 0.9])
        coeffs = np.zeros((9, 3))
        coeffs[0] = rgb_to_sh_dc(rgb)
        for d in random_unit_vectors(rng, 5):
            np.testing.assert_allclose(eval_sh(coeffs, d), rgb, atol=1e-12)

    def test_degree_one_lobe(self):
        coeffs = np.zeros((4, 3))
        coeffs[0] = 0.5 / SH_C0
        coeffs[2] = 2.0  # z lobe
        up = eval_sh(coeffs, np.array([0.0, 0.0, 1.0]))
        down = eval_sh(coeffs, np.array([0.0, 0.0, -1.0]))
        assert (up > 0.5).all()
        np.testing.assert_array_equal(down, np.zeros(3))

    def test_lower_degree_truncates(self):
        coeffs = np.zeros((9, 3))
        coeffs[0] = 0.3 / SH_C0
        coeffs[1:] = 5.0
        np.testing.assert_allclose(eval_sh(coeffs, np.array([0.0, 1.0, 0.0]), degree=0), [0.3, 0.3, 0.3])

    def test_degree_above_stored_raises(self):
        with pytest.raises(ValueError):
            eval_sh(np.zeros((4, 3)), np.array([0.0, 0.0, 1.0]), degree=2)


class TestSplatSet:
    """Packing value objects into parameter arrays."""

    def test_from_primitives(self):
        splats = [flat_splat(center=(float(i), 0.0, 0.0), opacity_logit=0.5 * i) for i in range(3)]
        packed = SplatSet.from_primitives(splats)
        assert packed.count == 3
        assert packed.has_tint
        np.testing.assert_allclose(packed.opacity_logit, [0.0, 0.5, 1.0])
        np.testing.assert_allclose(packed.primitive(2).center, [2.0, 0.0, 0.0])

    def test_environment_and_empty(self):
        env = EnvSplat(
            center=np.zeros(3),
            rotation=np.array([1.0, 0.0, 0.0, 0.0]),
            log_scale=np.zeros(2),
            opacity_logit=0.0,
            sh_coeffs=np.zeros((4, 3)),
        )
        assert not SplatSet.from_primitives([env], sh_degree=1).has_tint
        empty = SplatSet.from_primitives([], sh_degree=1)
        assert empty.count == 0
        assert np.shape(empty.sh_coeffs) == (0, 4, 3)
