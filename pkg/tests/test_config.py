"""Experiment-config serialization and validation."""

import json

import numpy as np
import pytest

from retractor.config import (
    ExperimentConfig,
    desk_preset,
    hardware_preset,
    load_config,
    save_config,
    simulation_preset,
)
from retractor.errors import ConfigError, InvalidParameterError
from retractor.scene import RoiEllipse


class TestPresets:
    def test_simulation_preset_defaults(self):
        cfg = simulation_preset()
        assert cfg.grid_dims == (40, 40, 3)
        assert cfg.layout.m == 15
        assert cfg.dataset_counts == (20, 5, 100)
        assert cfg.controller.gain == 5e-3
        assert cfg.controller.adaptation_rate == 2e4
        assert cfg.ga.epsilon == 0.9
        assert len(cfg.rois) == 1

    def test_desk_preset_is_small(self):
        cfg = desk_preset()
        assert cfg.grid_dims == (16, 16, 2)
        assert cfg.layout.m == 10
        assert np.prod(cfg.dataset_counts) <= 500

    def test_hardware_preset_gains(self):
        cfg = hardware_preset()
        assert cfg.controller.gain == 1e-2
        assert cfg.controller.adaptation_rate == 1e5
        assert cfg.controller.max_linear_step == 2e-3
        assert cfg.ga.epsilon == 0.75

    def test_default_roi_sits_past_the_carved_edge(self):
        cfg = simulation_preset()
        roi = cfg.rois[0]
        assert roi.center[1] > cfg.span
        assert roi.center[2] < 0


class TestSerialization:
    def test_dict_roundtrip(self):
        cfg = desk_preset()
        assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()

    def test_sections_present(self):
        doc = simulation_preset().to_dict()
        for key in ("sim", "rbf", "camera", "roi", "train", "controller",
                    "ga", "suite"):
            assert key in doc
        assert doc["schema_version"] == 1

    def test_file_roundtrip(self, tmp_path):
        cfg = desk_preset()
        cfg.scenario_seeds = [4, 5, 6]
        cfg.rois = [RoiEllipse(center=np.array([0.1, 0.25, -0.01]),
                               semi_axes=(0.03, 0.01), angle=0.4)]
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        loaded = load_config(path)
        assert loaded.to_dict() == cfg.to_dict()
        assert loaded.rois[0].angle == 0.4

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")

    def test_invalid_json_raises(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_schema_raises(self):
        doc = desk_preset().to_dict()
        doc["schema_version"] = 99
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_missing_section_raises(self):
        doc = desk_preset().to_dict()
        del doc["suite"]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_write_is_stable(self, tmp_path):
        cfg = desk_preset()
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_config(cfg, a)
        save_config(cfg, b)
        assert a.read_bytes() == b.read_bytes()


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        {"scenario_seeds": []},
        {"grid_dims": (16, 16)},
        {"dataset_counts": (0, 5, 100)},
        {"span": -0.2},
        {"sweep_spacing": 0.0},
        {"sweep_max_iters": 0},
        {"stall_window": -1},
        {"eval_trials": 0},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(InvalidParameterError):
            ExperimentConfig(**kwargs)

    def test_camera_defaults_to_oblique_view(self):
        cfg = ExperimentConfig()
        assert cfg.camera is not None
        assert cfg.camera.position[2] > 0  # above the sheet

    def test_sub_config_errors_surface(self):
        doc = desk_preset().to_dict()
        doc["controller"]["gain"] = -1.0
        with pytest.raises(InvalidParameterError):
            ExperimentConfig.from_dict(doc)
