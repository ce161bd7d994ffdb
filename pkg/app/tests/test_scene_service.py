"""
Scene Service Tests
===================

Scene files, camera files, dataset manifests and point-cloud initialization.
"""

import json

import numpy as np
import pytest

from app.config import DeformConfig, InitConfig
from app.core.exceptions import SceneParseError, SceneValidationError
from app.models.camera import Frame
from app.models.deformation import ENV, MAIN
from app.services.scene_service import (
    init_env_sphere,
    init_from_points,
    init_scene,
    load_cameras,
    load_dataset,
    load_scene,
    parse_scene,
    save_cameras,
    save_scene,
    scene_checksum,
    scene_to_json,
)
from app.services.splat_service import tangent_frame


class TestSceneFiles:
    """Save, load and reject scene documents."""

    def test_save_and_load_preserve_everything(self, scene, tmp_path):
        path = tmp_path / "scene.json"
        save_scene(scene, path)
        loaded = load_scene(path)
        assert scene_checksum(loaded) == scene_checksum(scene)
        np.testing.assert_array_equal(loaded.main.rotation, scene.main.rotation)
        for ours, theirs in zip(loaded.main_field.weights, scene.main_field.weights):
            np.testing.assert_array_equal(ours, theirs)

    def test_header_counts(self, scene):
        header = json.loads(scene_to_json(scene))["header"]
        assert header == {"version": 1, "n_main": 10, "n_env": 8, "sh_degree": 2}

    def test_malformed_json_reports_position(self):
        with pytest.raises(SceneParseError) as info:
            parse_scene('{"header": {,}}', "broken.json")
        assert info.value.line == 1
        assert info.value.column > 1
        assert "broken.json" in str(info.value)

    def test_invariant_violation_names_splat(self, scene):
        document = json.loads(scene_to_json(scene))
        document["main"][2]["rotation"] = [2.0, 0.0, 0.0, 0.0]
        with pytest.raises(SceneValidationError) as info:
            parse_scene(json.dumps(document))
        assert (info.value.kind, info.value.index, info.value.field) == (MAIN, 2, "rotation")

    def test_schema_violation_names_splat(self, scene):
        document = json.loads(scene_to_json(scene))
        document["env"][1]["center"] = [0.0, 1.0]
        with pytest.raises(SceneValidationError) as info:
            parse_scene(json.dumps(document))
        assert (info.value.kind, info.value.index, info.value.field) == ("env", 1, "center")

    def test_env_splat_with_tint_is_rejected(self, scene):
        document = json.loads(scene_to_json(scene))
        document["env"][0]["tint_logit"] = 0.5
        with pytest.raises(SceneValidationError) as info:
            parse_scene(json.dumps(document))
        assert (info.value.kind, info.value.field) == (ENV, "tint_logit")

    def test_count_mismatch(self, scene):
        document = json.loads(scene_to_json(scene))
        document["header"]["n_main"] = 11
        with pytest.raises(SceneValidationError):
            parse_scene(json.dumps(document))

    def test_non_finite_value(self, scene):
        bad = scene.main.with_fields(log_scale=np.where(np.arange(10)[:, None] == 4, np.nan, scene.main.log_scale))
        with pytest.raises(SceneValidationError) as info:
            bad.validate(MAIN)
        assert info.value.index == 4


class TestInitialization:
    """Fresh scenes from point clouds."""

    def test_scale_from_neighbors(self):
        points = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5)], axis=1)
        splats = init_from_points(points, np.full((5, 3), 0.5))
        np.testing.assert_allclose(np.exp(splats.log_scale[0]), [2.0, 2.0])
        np.testing.assert_allclose(np.exp(splats.log_scale[2]), [4.0 / 3.0, 4.0 / 3.0])
        np.testing.assert_allclose(splats.opacity, 0.1)
        np.testing.assert_allclose(splats.tint, 0.1)

    def test_few_points_use_default_scale(self):
        splats = init_from_points([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]] * 2, InitConfig(default_scale=0.2))
        np.testing.assert_allclose(np.exp(splats.log_scale), 0.2)

    def test_colors_are_reproduced_by_dc_term(self):
        splats = init_from_points([[0.0, 0.0, 0.0]], [[0.25, 0.5, 0.75]], InitConfig(sh_degree=1))
        assert splats.sh_coeffs.shape == (1, 4, 3)
        np.testing.assert_array_equal(splats.sh_coeffs[0, 1:], 0.0)

    def test_rejects_bad_input(self):
        with pytest.raises(SceneValidationError):
            init_from_points(np.zeros((0, 3)), np.zeros((0, 3)))
        with pytest.raises(SceneValidationError):
            init_from_points(np.zeros((3, 3)), np.zeros((2, 3)))

    def test_env_sphere_faces_center(self, rng):
        center = np.array([0.5, -0.2, 0.1])
        env = init_env_sphere(30, center, 2.0, rng)
        np.testing.assert_allclose(np.linalg.norm(env.center - center, axis=1), 2.0)
        _, _, normals = tangent_frame(env.rotation)
        inward = (center - env.center) / 2.0
        np.testing.assert_allclose(np.sum(normals * inward, axis=1), 1.0, atol=1e-9)
        assert env.tint_logit is None

    def test_init_scene_identity_fields(self, rng):
        points = rng.uniform(-1.0, 1.0, size=(20, 3))
        scene = init_scene(points, np.full((20, 3), 0.5), InitConfig(env_count=12), DeformConfig(hidden_width=8), rng)
        assert (scene.n_main, scene.n_env) == (20, 12)
        assert not scene.main_field.weights[-1].any()
        assert not scene.env_field.weights[-1].any()

    def test_env_from_points(self, rng):
        points = rng.uniform(-1.0, 1.0, size=(7, 3))
        scene = init_scene(points, np.full((7, 3), 0.5), InitConfig(env_from_points=True), DeformConfig(hidden_width=8), rng)
        assert scene.n_env == 7
        assert scene.env.tint_logit is None


class TestCamerasAndDatasets:
    """Camera files and dataset manifests."""

    def test_camera_file_round_trip(self, camera, tmp_path):
        frames = [Frame(camera, tmp_path / "images" / "a.pfm"), Frame(camera.with_time(1.0))]
        save_cameras(frames, tmp_path / "cameras.json")
        raw = json.loads((tmp_path / "cameras.json").read_text())
        assert raw[0]["image"] == "images/a.pfm"
        loaded = load_cameras(tmp_path / "cameras.json")
        assert loaded[0].image_path == tmp_path / "images" / "a.pfm"
        assert loaded[1].image_path is None
        assert loaded[1].camera.time == 1.0
        np.testing.assert_array_equal(loaded[0].camera.world_to_camera, camera.world_to_camera)

    def test_camera_record_violation(self, camera, tmp_path):
        save_cameras([Frame(camera), Frame(camera)], tmp_path / "cameras.json")
        raw = json.loads((tmp_path / "cameras.json").read_text())
        raw[1]["time"] = 1.5
        (tmp_path / "cameras.json").write_text(json.dumps(raw))
        with pytest.raises(SceneValidationError) as info:
            load_cameras(tmp_path / "cameras.json")
        assert (info.value.kind, info.value.index) == ("camera", 1)

    def test_load_dataset(self, tiny_dataset, tiny_spec):
        dataset = load_dataset(tiny_dataset)
        assert len(dataset) == tiny_spec.frames
        assert dataset.points_path is not None and dataset.points_path.exists()
        assert dataset.trace_settings["epsilon"] > 0.0
        assert all(f.normal_path is not None for f in dataset.frames)

    def test_missing_image(self, tiny_dataset, tmp_path):
        manifest = json.loads(tiny_dataset.read_text())
        cameras = json.loads((tiny_dataset.parent / manifest["cameras"]).read_text())
        for record in cameras:
            record["image"] = str(tiny_dataset.parent / record["image"])
            record["normal_map"] = str(tiny_dataset.parent / record["normal_map"])
        cameras[0]["image"] = str(tmp_path / "nowhere.pfm")
        (tmp_path / "cameras.json").write_text(json.dumps(cameras))
        (tmp_path / "init_scene.json").write_text((tiny_dataset.parent / manifest["scene"]).read_text())
        (tmp_path / "dataset.json").write_text(json.dumps({"cameras": "cameras.json", "scene": "init_scene.json"}))
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)
