"""
Tracer Service Tests
====================

BVH construction, k-nearest hit gathering and specular compositing of
reflection rays against the environment splats.
"""

import numpy as np
import pytest

from app.config import TraceSettings
from app.core.exceptions import RenderError
from app.core.utils import random_unit_vectors
from app.models.ray import Ray
from app.models.splat import SplatSet
from app.services.check_service import random_env_cloud
from app.services.tracer_service import (
    brute_force_gather,
    brute_force_trace,
    build_bvh,
    gather_hits,
    gather_k_hits,
    inverse_affines,
    resolve_epsilon,
    scene_diagonal,
    trace_specular,
    validate_bvh,
)


@pytest.fixture
def cloud(rng):
    return random_env_cloud(rng, 150)


@pytest.fixture
def rays(rng):
    return rng.uniform(-1.0, 1.0, size=(60, 3)), random_unit_vectors(rng, 60)


class TestBvh:
    """Hierarchy structure."""

    def test_sound_structure(self, cloud):
        settings = TraceSettings(leaf_size=3)
        bvh = build_bvh(cloud, settings)
        assert validate_bvh(bvh) == []
        assert (bvh.count[bvh.leaves()] <= 3).all()
        assert sorted(bvh.order.tolist()) == list(range(cloud.count))

    def test_single_splat(self, cloud):
        bvh = build_bvh(cloud.subset(np.arange(cloud.count) == 0))
        assert bvh.n_nodes == 1
        assert validate_bvh(bvh) == []

    def test_empty_environment(self):
        bvh = build_bvh(SplatSet.empty(0))
        assert bvh.n_nodes == 0
        table = gather_hits(bvh, np.zeros((4, 3)), np.tile([0.0, 0.0, 1.0], (4, 1)))
        assert not table.valid.any()


class TestGather:
    """BVH traversal returns exactly the brute-force hit lists."""

    def test_same_hits_as_brute_force(self, cloud, rays):
        origins, directions = rays
        settings = TraceSettings(k=8)
        fast = gather_hits(build_bvh(cloud, settings), origins, directions, settings)
        slow = brute_force_gather(cloud, origins, directions, settings)
        np.testing.assert_array_equal(fast.index, slow.index)
        np.testing.assert_allclose(fast.depth[fast.valid], slow.depth[slow.valid])

    def test_sorted_and_truncated(self, cloud, rays):
        origins, directions = rays
        settings = TraceSettings(k=3)
        table = gather_hits(build_bvh(cloud, settings), origins, directions, settings)
        assert table.index.shape == (60, 3)
        depth = np.where(table.valid, table.depth, np.finfo(np.float64).max)
        assert (np.diff(depth, axis=1) >= 0.0).all()
        # valid slots form a prefix of each row
        assert (np.diff(table.valid.astype(int), axis=1) <= 0).all()
        wide = brute_force_gather(cloud, origins, directions, TraceSettings(k=cloud.count))
        np.testing.assert_array_equal(table.index, wide.index[:, :3])

    def test_t_min_skips_near_hits(self, cloud, rays):
        origins, directions = rays
        settings = TraceSettings(k=cloud.count)
        table = gather_hits(build_bvh(cloud, settings), origins, directions, settings, t_min=0.5)
        assert (table.depth[table.valid] >= 0.5).all()

    def test_single_ray_hits(self, cloud, rays):
        origins, directions = rays
        bvh = build_bvh(cloud)
        for o, d in zip(origins[:10], directions[:10]):
            hits = gather_k_hits(Ray(o, d), bvh, TraceSettings(k=4))
            assert len(hits) <= 4
            assert [h.depth for h in hits] == sorted(h.depth for h in hits)
            for hit in hits:
                np.testing.assert_allclose(hit.world_point, o + hit.depth * d)


class TestTraceSpecular:
    """Compositing of the gathered hits."""

    def test_matches_per_ray_reference(self, cloud, rays):
        origins, directions = rays
        settings = TraceSettings(k=16)
        result = trace_specular(origins, directions, cloud, build_bvh(cloud, settings), settings)
        inverse = inverse_affines(cloud)
        for o, d, color, t in zip(origins, directions, result.color, result.transmittance):
            reference = brute_force_trace(Ray(o, d), cloud, settings, inverse)
            np.testing.assert_allclose(color, reference.color, atol=1e-9)
            assert t == pytest.approx(reference.transmittance, abs=1e-9)

    def test_miss_color(self, cloud):
        settings = TraceSettings(miss_color=(0.1, 0.2, 0.3))
        origins = np.tile([0.0, 0.0, 100.0], (3, 1))
        directions = np.tile([0.0, 0.0, 1.0], (3, 1))
        result = trace_specular(origins, directions, cloud, build_bvh(cloud, settings), settings)
        np.testing.assert_allclose(result.color, np.tile([0.1, 0.2, 0.3], (3, 1)))
        np.testing.assert_array_equal(result.transmittance, 1.0)

    def test_colors_are_convex_combinations(self, cloud, rays):
        origins, directions = rays
        result = trace_specular(origins, directions, cloud, build_bvh(cloud))
        assert (np.asarray(result.color) >= 0.0).all()
        assert (np.asarray(result.transmittance) <= 1.0).all()

    def test_removing_unhit_splats_keeps_colors_exact(self, cloud, rays):
        origins, directions = rays
        settings = TraceSettings(k=8)
        full = trace_specular(origins, directions, cloud, build_bvh(cloud, settings), settings)
        hit = np.unique(full.hits.index[full.hits.valid])
        assert 0 < len(hit) < cloud.count
        kept = cloud.subset(np.isin(np.arange(cloud.count), hit))
        pruned = trace_specular(origins, directions, kept, build_bvh(kept, settings), settings)
        np.testing.assert_array_equal(pruned.color, full.color)
        np.testing.assert_array_equal(pruned.transmittance, full.transmittance)

    def test_color_is_linear_in_dc_coefficient(self, cloud, rays, rng):
        """Degree-0 cloud: blending two coefficient sets blends the traced colors the same way."""
        origins, directions = rays
        bvh = build_bvh(cloud)
        first = cloud.with_fields(sh_coeffs=rng.uniform(0.5, 2.0, size=np.shape(cloud.sh_coeffs)))
        second = cloud.with_fields(sh_coeffs=rng.uniform(0.5, 2.0, size=np.shape(cloud.sh_coeffs)))
        blend = cloud.with_fields(sh_coeffs=0.3 * first.sh_coeffs + 0.7 * second.sh_coeffs)
        colors = [np.asarray(trace_specular(origins, directions, s, bvh).color) for s in (first, second, blend)]
        np.testing.assert_allclose(colors[2], 0.3 * colors[0] + 0.7 * colors[1], atol=1e-12)

    def test_splat_order_does_not_change_colors(self, cloud, rays, rng):
        origins, directions = rays
        shuffled = cloud.subset(rng.permutation(cloud.count))
        reference = trace_specular(origins, directions, cloud, build_bvh(cloud))
        result = trace_specular(origins, directions, shuffled, build_bvh(shuffled))
        np.testing.assert_allclose(result.color, reference.color, atol=1e-12)
        np.testing.assert_allclose(result.transmittance, reference.transmittance, atol=1e-12)


class TestEpsilon:
    """Self-intersection offset of reflection rays."""

    def test_fraction_of_diagonal(self, cloud):
        settings = TraceSettings(epsilon_fraction=1e-3)
        assert resolve_epsilon(settings, cloud) == pytest.approx(1e-3 * scene_diagonal(cloud))

    def test_explicit_value_wins(self, cloud):
        assert resolve_epsilon(TraceSettings(epsilon=0.02), cloud) == 0.02

    def test_degenerate_scene(self, cloud):
        single = cloud.subset(np.arange(cloud.count) == 0)
        with pytest.raises(RenderError):
            resolve_epsilon(TraceSettings(), single)
        with pytest.raises(RenderError):
            resolve_epsilon(TraceSettings(), SplatSet.empty(0))
