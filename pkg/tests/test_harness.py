"""Experiment-suite tests: scenario plumbing, sweep, suite, report.

End-to-end pieces run on the shared tiny network with coarse candidate
grids and tight iteration caps so the whole file stays in tens of seconds;
full-scale behavior belongs to the acceptance suite.
"""

import json
import math

import numpy as np
import pytest

from retractor.config import desk_preset
from retractor.errors import ConfigError, InvalidParameterError
from retractor.harness import (
    ACCEPTANCE_IDS,
    SweepResult,
    build_scenario,
    classify_feasibility,
    emit_report,
    nearest_boundary_node,
    read_sweep_json,
    run_estimator_eval,
    run_grasp_sweep,
    run_retraction_suite,
    worker_count,
    write_mcd_csv,
    write_suite_csv,
    write_sweep_csv,
    write_sweep_json,
)
from retractor.scene import RoiEllipse


def tiny_config(**overrides):
    """Desk preset pinned to the shared tiny network's scale."""
    cfg = desk_preset()
    cfg.scenario_seeds = [99001]
    for name, value in overrides.items():
        setattr(cfg, name, value)
    return cfg


def roi_at(cfg, dy):
    spacing = cfg.span / (cfg.grid_dims[0] - 1)
    table_z = -spacing * (cfg.grid_dims[2] - 1)
    return RoiEllipse(
        center=np.array([cfg.span / 2, cfg.span + dy, table_z]),
        semi_axes=(0.04, 0.02),
        angle=0.0,
    )


# ---------------------------------------------------------------------------


class TestWorkerCount:
    def test_default_sequential(self, monkeypatch):
        monkeypatch.delenv("RETRACTOR_THREADS", raising=False)
        assert worker_count() == 0

    def test_reads_env(self, monkeypatch):
        monkeypatch.setenv("RETRACTOR_THREADS", "3")
        assert worker_count() == 3

    def test_negative_clamps_to_sequential(self, monkeypatch):
        monkeypatch.setenv("RETRACTOR_THREADS", "-2")
        assert worker_count() == 0

    def test_garbage_raises(self, monkeypatch):
        monkeypatch.setenv("RETRACTOR_THREADS", "many")
        with pytest.raises(ConfigError):
            worker_count()


class TestBuildScenario:
    def test_deterministic(self):
        cfg = tiny_config()
        mesh_a, scene_a = build_scenario(cfg, 0)
        mesh_b, scene_b = build_scenario(cfg, 0)
        assert np.array_equal(mesh_a.node_positions, mesh_b.node_positions)
        assert np.array_equal(scene_a.projected_roi.conic,
                              scene_b.projected_roi.conic)

    def test_rois_cycle(self):
        cfg = tiny_config(scenario_seeds=[99001, 99002, 99003])
        cfg.rois = [roi_at(cfg, 0.015), roi_at(cfg, 0.05)]
        _, scene0 = build_scenario(cfg, 0)
        _, scene2 = build_scenario(cfg, 2)
        assert scene0.roi.center[1] == scene2.roi.center[1]
        _, scene1 = build_scenario(cfg, 1)
        assert scene1.roi.center[1] != scene0.roi.center[1]

    def test_nearest_boundary_node_is_on_boundary(self):
        cfg = tiny_config()
        mesh, _ = build_scenario(cfg, 0)
        point = nearest_boundary_node(mesh, 0.1)
        boundary = mesh.node_positions[mesh.boundary_order]
        assert np.min(np.linalg.norm(boundary - point, axis=1)) == 0.0


class TestEstimatorEval:
    def test_table_shape_and_scale(self, tiny_model):
        cfg = tiny_config(eval_trials=3, eval_distances=(0.0, 0.02))
        table = run_estimator_eval(cfg, tiny_model)
        assert set(table) == {0.0, 0.02}
        for row in table.values():
            assert set(row) >= {"mcd", "mean", "p10", "p90"}
            assert len(row["mcd"]) == 3
            assert row["p10"] <= row["mean"] <= row["p90"] + 1e-12
        # at zero displacement the model reproduces the rest boundary to
        # its own training error, about a centimeter for the tiny net
        assert table[0.0]["mean"] < 0.02

    def test_csv_one_row_per_distance(self, tiny_model, tmp_path):
        cfg = tiny_config(eval_trials=2, eval_distances=(0.0, 0.01, 0.02))
        table = run_estimator_eval(cfg, tiny_model)
        path = tmp_path / "mcd.csv"
        write_mcd_csv(table, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "distance,mean,p10,p90"
        assert len(lines) == 4
        distances = [float(line.split(",")[0]) for line in lines[1:]]
        assert distances == sorted(distances)

    def test_empty_table_writes_header_only(self, tmp_path):
        path = tmp_path / "mcd.csv"
        write_mcd_csv({}, path)
        assert path.read_text() == "distance,mean,p10,p90\n"


# ---------------------------------------------------------------------------


class TestSweepResult:
    def _ok(self, **overrides):
        fields = dict(
            positions=np.array([0.0, 0.1, 0.2]),
            success=[True, False, True],
            force=[1.5, None, 2.5],
            iterations=[10, 50, 12],
            planner_position=0.2,
            planner_index=2,
            planner_feasible=True,
            scenario_seed=7,
        )
        fields.update(overrides)
        return SweepResult(**fields)

    def test_valid_roundtrips_json(self, tmp_path):
        result = self._ok()
        path = tmp_path / "sweep.json"
        write_sweep_json(result, path)
        back = read_sweep_json(path)
        assert back.to_dict() == result.to_dict()

    def test_rejects_unsorted_positions(self):
        with pytest.raises(InvalidParameterError):
            self._ok(positions=np.array([0.0, 0.2, 0.1]))

    def test_rejects_force_on_failed_candidate(self):
        with pytest.raises(InvalidParameterError):
            self._ok(force=[1.5, 3.0, 2.5])

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(InvalidParameterError):
            self._ok(success=[True, False])

    def test_rejects_unknown_schema(self, tmp_path):
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps({"schema_version": 99}))
        with pytest.raises(InvalidParameterError):
            read_sweep_json(path)

    def test_csv_marks_planner_pick_once(self, tmp_path):
        path = tmp_path / "sweep.csv"
        write_sweep_csv(self._ok(), path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "position,success,force_at_exposure,planner_pick"
        assert len(lines) == 4
        picks = [line.split(",")[3] for line in lines[1:]]
        assert picks == ["0", "0", "1"]
        assert lines[2].split(",")[2] == ""  # failed candidate, no force

    def test_empty_sweep_writes_header_only(self, tmp_path):
        empty = SweepResult(
            positions=np.array([]), success=[], force=[], iterations=[],
            planner_position=None, planner_index=None,
            planner_feasible=False, scenario_seed=0,
        )
        path = tmp_path / "sweep.csv"
        write_sweep_csv(empty, path)
        assert path.read_text() == "position,success,force_at_exposure,planner_pick\n"


class TestGraspSweep:
    def test_coarse_sweep_end_to_end(self, tiny_model):
        cfg = tiny_config(sweep_spacing=0.05, sweep_max_iters=300)
        result = run_grasp_sweep(cfg, tiny_model, seed=3)
        assert len(result.positions) == 5
        assert result.positions[0] == 0.0
        assert result.positions[-1] == cfg.span
        assert np.all(np.diff(result.positions) > 0)
        assert any(result.success)
        for ok, force in zip(result.success, result.force):
            if ok:
                assert force > 0
            else:
                assert force is None
        assert result.planner_feasible
        assert result.planner_position in result.positions

    def test_five_mm_grid_has_41_candidates(self, tiny_model):
        # iteration cap of 1 makes every rollout fail immediately; the
        # candidate enumeration and bookkeeping are what is under test
        cfg = tiny_config(sweep_max_iters=1, stall_window=0)
        result = run_grasp_sweep(cfg, tiny_model, seed=0)
        assert len(result.positions) == 41
        assert result.positions[0] == 0.0
        assert result.positions[-1] == cfg.span
        assert not any(result.success)
        assert all(force is None for force in result.force)

    def test_deterministic(self, tiny_model):
        cfg = tiny_config(sweep_spacing=0.1, sweep_max_iters=200)
        a = run_grasp_sweep(cfg, tiny_model, seed=5)
        b = run_grasp_sweep(cfg, tiny_model, seed=5)
        assert a.to_dict() == b.to_dict()


# ---------------------------------------------------------------------------


class TestRetractionSuite:
    def test_feasible_scenario_succeeds(self, tiny_model):
        cfg = tiny_config(sweep_spacing=0.05)
        suite = run_retraction_suite(cfg, tiny_model)
        row = suite.scenarios[0]
        assert row["feasible"] is True
        assert row["success"] is True
        assert row["iterations"] > 0
        assert row["peak_force"] > 0
        assert suite.success_rate == 1.0

    def test_pre_exposed_counts_as_zero_iteration_success(self, tiny_model):
        cfg = tiny_config(sweep_spacing=0.05)
        cfg.rois = [roi_at(cfg, 0.05)]
        suite = run_retraction_suite(cfg, tiny_model)
        row = suite.scenarios[0]
        assert row["success"] is True
        assert row["iterations"] == 0

    def test_infeasible_excluded_from_denominator(self, tiny_model):
        # an iteration budget no candidate can meet: the oracle sees every
        # rollout fail and drops the scenario from the denominator
        cfg = tiny_config(sweep_spacing=0.05, sweep_max_iters=1, stall_window=0)
        suite = run_retraction_suite(cfg, tiny_model)
        row = suite.scenarios[0]
        assert row["feasible"] is False
        assert row["success"] is None
        assert suite.feasible_count == 0
        assert math.isnan(suite.success_rate)
        assert suite.to_dict()["success_rate"] is None

    def test_classify_feasibility_matches_suite(self, tiny_model):
        cfg = tiny_config(sweep_spacing=0.05)
        assert classify_feasibility(cfg, tiny_model, 0) is True

    def test_suite_csv(self, tiny_model, tmp_path):
        cfg = tiny_config(sweep_spacing=0.05)
        suite = run_retraction_suite(cfg, tiny_model)
        path = tmp_path / "suite.csv"
        write_suite_csv(suite, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == (
            "scenario_seed,feasible,planned_q_x0,success,iterations,peak_force"
        )
        assert len(lines) == 2
        cells = lines[1].split(",")
        assert cells[0] == "99001"
        assert cells[1] == "1"
        assert cells[3] == "1"


# ---------------------------------------------------------------------------


class TestEmitReport:
    def test_summary_lists_every_criterion_once(self, tmp_path):
        paths = emit_report(tmp_path)
        doc = json.loads((tmp_path / "summary.json").read_text())
        assert list(doc["acceptance"]) == list(ACCEPTANCE_IDS)
        assert len(ACCEPTANCE_IDS) == 11
        assert all(v == "not-run" for v in doc["acceptance"].values())
        assert paths["summary"].endswith("summary.json")

    def test_verdicts_rendered(self, tmp_path):
        emit_report(tmp_path, acceptance={"AC8": True, "AC10": False})
        doc = json.loads((tmp_path / "summary.json").read_text())
        assert doc["acceptance"]["AC8"] == "pass"
        assert doc["acceptance"]["AC10"] == "fail"
        assert doc["acceptance"]["AC1"] == "not-run"

    def test_unknown_criterion_rejected(self, tmp_path):
        with pytest.raises(InvalidParameterError):
            emit_report(tmp_path, acceptance={"AC99": True})

    def test_rerun_is_byte_identical(self, tiny_model, tmp_path):
        cfg = tiny_config(sweep_spacing=0.1, sweep_max_iters=200)
        sweep = run_grasp_sweep(cfg, tiny_model, seed=1)
        emit_report(tmp_path, sweeps=[sweep], acceptance={"AC9": True})
        first = (tmp_path / "summary.json").read_bytes()
        first_csv = (tmp_path / "sweep_0.csv").read_bytes()
        emit_report(tmp_path, sweeps=[sweep], acceptance={"AC9": True})
        assert (tmp_path / "summary.json").read_bytes() == first
        assert (tmp_path / "sweep_0.csv").read_bytes() == first_csv

    def test_metrics_include_sweep_median_and_seeds(self, tiny_model, tmp_path):
        cfg = tiny_config(sweep_spacing=0.1, sweep_max_iters=200)
        sweep = run_grasp_sweep(cfg, tiny_model, seed=1)
        emit_report(tmp_path, sweeps=[sweep])
        doc = json.loads((tmp_path / "summary.json").read_text())
        assert doc["seeds"]["sweeps"] == [99001]
        medians = doc["metrics"]["sweep_force_median"]
        assert len(medians) == 1
        forces = [f for f in sweep.force if f is not None]
        assert medians[0] == pytest.approx(float(np.median(forces)))

    def test_empty_mcd_table_yields_header_only_csv(self, tmp_path):
        emit_report(tmp_path, mcd_table={})
        assert (tmp_path / "mcd.csv").read_text() == "distance,mean,p10,p90\n"

    def test_mcd_metrics_tolerate_missing_trial_arrays(self, tmp_path):
        table = {0.02: {"mean": 0.01, "p10": 0.008, "p90": 0.012}}
        emit_report(tmp_path, mcd_table=table)
        doc = json.loads((tmp_path / "summary.json").read_text())
        assert doc["metrics"]["mcd"]["0.0200"]["median"] is None
        assert doc["metrics"]["mcd"]["0.0200"]["mean"] == 0.01
