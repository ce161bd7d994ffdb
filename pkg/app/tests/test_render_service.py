"""
Hybrid Render Service Tests
===========================

Blending, reflection rays and agreement of the fast hybrid renderer with
the end-to-end oracle and with generated ground truth.
"""

import numpy as np

from app.config import RenderSettings, TraceSettings
from app.services.image_service import load_image
from app.services.render_service import blend, oracle_render_hybrid, reflection_rays, render_hybrid
from app.services.scene_service import load_dataset, load_scene
from app.services.splat_service import reflect


class TestBlend:
    """Per-pixel convex mix of diffuse and specular colors."""

    def test_endpoints_and_midpoint(self):
        diffuse = np.array([[0.2, 0.4, 0.6]] * 3)
        specular = np.array([[1.0, 0.0, 0.5]] * 3)
        mixed = blend(diffuse, specular, np.array([0.0, 1.0, 0.5]))
        np.testing.assert_allclose(mixed[0], diffuse[0])
        np.testing.assert_allclose(mixed[1], specular[1])
        np.testing.assert_allclose(mixed[2], [0.6, 0.2, 0.55])


class TestReflectionRays:
    """Surface points offset along the normal oriented toward the camera."""

    def test_normals_facing_away_are_flipped(self, camera):
        forward = camera.rotation[2]
        pixel_ids = np.arange(camera.pixel_count)
        depth = np.full((camera.height, camera.width), 2.0)
        away = np.broadcast_to(forward, (camera.height, camera.width, 3)).copy()
        origins, directions = reflection_rays(camera, depth, away, pixel_ids, 0.01)
        views = camera.ray_directions().reshape(-1, 3)
        np.testing.assert_allclose(origins, camera.origin + 2.0 * views - 0.01 * forward)
        np.testing.assert_allclose(directions, reflect(views, np.tile(-forward, (len(views), 1))))
        np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)


class TestRenderHybrid:
    """Fast path against the exhaustive reference."""

    def test_matches_oracle(self, scene, camera):
        settings, trace = RenderSettings(), TraceSettings(k=scene.n_env)
        frame = render_hybrid(scene, camera.time, camera, settings, trace)
        reference = oracle_render_hybrid(scene, camera.time, camera, settings, trace)
        assert np.abs(np.asarray(frame.image) - reference).max() < 1e-6

    def test_traced_pixels_are_convex_mixes(self, scene, camera):
        frame = render_hybrid(scene, camera.time, camera, trace_settings=TraceSettings(k=scene.n_env))
        image = np.asarray(frame.image)
        lo = np.minimum(frame.buffers.diffuse, frame.specular) - 1e-12
        hi = np.maximum(frame.buffers.diffuse, frame.specular) + 1e-12
        inside = (image >= lo) & (image <= hi)
        assert inside[frame.traced].all()
        np.testing.assert_array_equal(image[~frame.traced], frame.buffers.diffuse[~frame.traced])

    def test_without_specular_is_diffuse(self, scene, camera):
        frame = render_hybrid(scene, camera.time, camera, specular=False)
        np.testing.assert_array_equal(frame.image, frame.buffers.diffuse)
        assert not frame.traced.any()
        np.testing.assert_array_equal(frame.specular, 0.0)

    def test_reproduces_generated_ground_truth(self, tiny_dataset, tiny_spec):
        dataset = load_dataset(tiny_dataset)
        epsilon = dataset.trace_settings["epsilon"]
        trace = TraceSettings(k=tiny_spec.env_count)
        for i, frame in enumerate(dataset.frames):
            reference = load_scene(tiny_dataset.parent / "reference" / f"frame_{i:03d}.json")
            rendered = render_hybrid(reference, frame.camera.time, frame.camera, RenderSettings(), trace, epsilon)
            gt = load_image(frame.image_path)
            assert np.abs(np.asarray(rendered.image) - gt).max() < 1e-5
