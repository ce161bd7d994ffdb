"""
Command Line Tests
==================

Exit codes and outputs of the subcommands.
"""

import json
import shutil
from pathlib import Path

import numpy as np

from app.main import main
from app.models.splat import SplatSet
from app.services.image_service import load_image, save_image
from app.services.scene_service import load_scene, save_scene


class TestUsage:
    """Argument errors exit with code 2."""

    def test_no_command(self):
        assert main([]) == 2

    def test_unknown_command(self):
        assert main(["frobnicate"]) != 0

    def test_missing_arguments(self):
        assert main(["eval"]) == 2


class TestEval:
    """`eval <renders> <gt>`."""

    def test_identical_directories(self, tmp_path, rng, capsys):
        image = rng.uniform(size=(16, 16, 3))
        for d in ("renders", "gt"):
            save_image(image, tmp_path / d / "frame_000.pfm")
        report_path = tmp_path / "report.json"
        assert main(["eval", str(tmp_path / "renders"), str(tmp_path / "gt"), "--json", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert report["mean_psnr"] == 99.0
        assert "frame_000" in capsys.readouterr().out

    def test_missing_directory(self, tmp_path):
        assert main(["eval", str(tmp_path / "a"), str(tmp_path / "b")]) == 1


class TestRender:
    """`render <scene> <cameras> <out_dir> [--buffers]`."""

    def test_buffers_written(self, tiny_dataset, tmp_path):
        root = tiny_dataset.parent
        out = tmp_path / "renders"
        code = main(["render", str(root / "reference" / "frame_000.json"), str(root / "cameras.json"), str(out), "--buffers"])
        assert code == 0
        for name in ("frame_000", "frame_001"):
            assert (out / f"{name}.pfm").exists()
            for buffer in ("diffuse", "depth", "normal", "alpha_spec", "specular"):
                assert (out / "buffers" / f"{name}_{buffer}.pfm").exists()
        timings = json.loads((out / "timings.json").read_text())
        assert set(timings) == {"frame_000", "frame_001"}
        assert main(["eval", str(out), str(root / "images")]) == 0

    def test_background_from_dataset_manifest(self, tiny_dataset, tmp_path):
        """Without --config the renders use the background of the dataset beside the cameras."""
        root = tmp_path / "dataset"
        shutil.copytree(tiny_dataset.parent, root)
        manifest = json.loads((root / "dataset.json").read_text())
        manifest["background"] = [0.25, 0.5, 0.75]
        (root / "dataset.json").write_text(json.dumps(manifest))
        reference = load_scene(root / "reference" / "frame_000.json")
        save_scene(reference._replace(main=SplatSet.empty(reference.env.sh_degree, with_tint=True)), tmp_path / "empty.json")

        out = tmp_path / "renders"
        assert main(["render", str(tmp_path / "empty.json"), str(root / "cameras.json"), str(out)]) == 0
        image = load_image(out / "frame_000.pfm")
        np.testing.assert_allclose(image, np.broadcast_to([0.25, 0.5, 0.75], image.shape))

        explicit = tmp_path / "explicit"
        code = main(["render", str(tmp_path / "empty.json"), str(root / "cameras.json"), str(explicit), "--dataset", str(tiny_dataset.parent)])
        assert code == 0
        np.testing.assert_array_equal(load_image(explicit / "frame_000.pfm"), 0.0)

    def test_bad_scene_file(self, tiny_dataset, tmp_path):
        scene = tmp_path / "scene.json"
        scene.write_text("{")
        assert main(["render", str(scene), str(tiny_dataset.parent / "cameras.json"), str(tmp_path / "out")]) == 1


class TestTrain:
    """`train <config.json>`."""

    def test_short_run(self, tiny_dataset, tmp_path, capsys):
        config = Path(__file__).resolve().parents[2] / "configs" / "train_smoke.json"
        out = tmp_path / "run"
        code = main(["train", str(config), "--dataset", str(tiny_dataset.parent), "--output", str(out), "--steps", "2"])
        assert code == 0
        assert (out / "final_scene.json").exists()
        assert len((out / "train_log.csv").read_text().splitlines()) == 3
        assert "Training finished" in (out / "run.log").read_text()
        assert "final loss" in capsys.readouterr().out

    def test_missing_config(self, tmp_path):
        assert main(["train", str(tmp_path / "absent.json"), "--dataset", str(tmp_path)]) == 1


class TestCheck:
    """`check` exit status follows the suites."""

    def test_quick_reflection(self, capsys):
        assert main(["check", "--quick", "--suite", "reflection"]) == 0
        assert "PASS" in capsys.readouterr().out


class TestSynth:
    """`synth <spec.json> <out_dir>`."""

    def test_writes_dataset(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"frames": 2, "width": 16, "height": 16, "env_count": 4, "plate_grid": 2}))
        assert main(["synth", str(spec), str(tmp_path / "data")]) == 0
        assert (tmp_path / "data" / "dataset.json").exists()
        assert np.load(tmp_path / "data" / "points.npy").shape == (4, 6)
