"""
Configuration Tests
===================

Validation of the pipeline records and loading of config files.
"""

import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from app.config import (
    LossWeights,
    PhaseSchedule,
    ProductionSettings,
    RenderSettings,
    Settings,
    SyntheticSpec,
    TraceSettings,
    TrainConfig,
    get_environment_settings,
    load_synthetic_spec,
    load_train_config,
)
from app.core.exceptions import ConfigError


class TestRecords:
    """Field validators."""

    def test_defaults(self):
        config = TrainConfig()
        assert config.schedule.total_steps == 60000
        assert config.trace.k == 16
        assert config.render.alpha_mask_threshold == 0.5

    def test_schedule_order(self):
        with pytest.raises(ValidationError):
            PhaseSchedule(diffuse_end=0.3, specular_end=0.2)
        with pytest.raises(ValidationError):
            PhaseSchedule(total_steps=-1)

    def test_render_settings(self):
        with pytest.raises(ValidationError):
            RenderSettings(tile_size=0)
        with pytest.raises(ValidationError):
            RenderSettings(background=(0.0, 1.5, 0.0))
        with pytest.raises(ValidationError):
            RenderSettings(early_stop=0.0)
        assert RenderSettings().cutoff_radius == pytest.approx(3.0)

    def test_trace_settings(self):
        with pytest.raises(ValidationError):
            TraceSettings(k=0)
        with pytest.raises(ValidationError):
            TraceSettings(epsilon=-1.0)

    def test_loss_weights(self):
        with pytest.raises(ValidationError):
            LossWeights(lambda_norm=-0.1)

    def test_synthetic_spec(self):
        with pytest.raises(ValidationError):
            SyntheticSpec(frames=1)
        with pytest.raises(ValidationError):
            SyntheticSpec(width=8)
        with pytest.raises(ValidationError):
            SyntheticSpec(env_count=0)

    def test_settings_log_level(self):
        assert Settings(LOG_LEVEL="debug").LOG_LEVEL == "DEBUG"
        with pytest.raises(ValidationError):
            Settings(LOG_LEVEL="LOUD")
        with pytest.raises(ValidationError):
            Settings(WORKERS=0)

    def test_environment_settings(self, monkeypatch):
        monkeypatch.setenv("ENVIRONMENT", "production")
        production = get_environment_settings()
        assert isinstance(production, ProductionSettings)
        assert production.LOG_TO_FILE
        monkeypatch.setenv("ENVIRONMENT", "development")
        assert type(get_environment_settings()) is Settings


class TestFiles:
    """JSON config files."""

    def test_relative_paths_resolve_against_file(self, tmp_path):
        path = tmp_path / "configs" / "run.json"
        path.parent.mkdir()
        path.write_text(json.dumps({"dataset": "../data", "output_dir": "out", "schedule": {"total_steps": 10}}))
        config = load_train_config(path)
        assert config.dataset == str(path.parent / "../data")
        assert config.output_dir == str(path.parent / "out")
        assert config.schedule.total_steps == 10

    def test_absolute_paths_kept(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"dataset": str(tmp_path / "d"), "output_dir": str(tmp_path / "o")}))
        config = load_train_config(path)
        assert config.dataset == str(tmp_path / "d")

    def test_invalid_values(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"beta1": 1.5}))
        with pytest.raises(ConfigError):
            load_train_config(path)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_train_config(tmp_path / "missing.json")
        (tmp_path / "broken.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_train_config(tmp_path / "broken.json")

    def test_synthetic_spec_file(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"kind": "spinning_plate", "frames": 4}))
        spec = load_synthetic_spec(path)
        assert spec.frames == 4
        path.write_text(json.dumps({"kind": "teapot"}))
        with pytest.raises(ConfigError):
            load_synthetic_spec(path)

    def test_shipped_configs(self):
        configs = Path(__file__).resolve().parents[2] / "configs"
        for path in sorted(configs.glob("synthetic_*.json")):
            load_synthetic_spec(path)
        for path in sorted(configs.glob("train_*.json")):
            config = load_train_config(path)
            assert Path(config.dataset).is_absolute()
