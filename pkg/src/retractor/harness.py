"""Experiment suites: estimator evaluation, end-to-end retraction over
seeded scenarios, and the exhaustive grasp sweep, plus CSV/JSON reporting.

Every suite is a pure function of (config, seed).  Scenario fan-out can
use a thread pool; RETRACTOR_THREADS caps the worker count and 0 (the
default) means sequential, which is the mode the byte-level determinism
guarantees apply to.  Aggregation preserves scenario order either way.
"""

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from retractor.config import ExperimentConfig
from retractor.controller import (
    EpisodeRecord,
    control_step,
    run_retraction,
    start_retraction,
)
from retractor.errors import (
    ConfigError,
    InsufficientObservationError,
    InvalidParameterError,
    NumericalDivergenceError,
    ProjectionError,
    SingularGeometryError,
)
from retractor.estimator import evaluate_mcd, generate_dataset, write_dataset
from retractor.mesh import bind_grasp, build_tissue_mesh, generate_boundary_profile
from retractor.planner import optimize_grasp
from retractor.scene import RetractionScene

log = logging.getLogger("retractor.harness")

_SWEEP_SCHEMA = 1
_SUITE_SCHEMA = 1
_REPORT_SCHEMA = 1

ACCEPTANCE_IDS = tuple(f"AC{i}" for i in range(1, 12))


def worker_count() -> int:
    """Worker cap from RETRACTOR_THREADS; 0 or unset means sequential."""
    raw = os.environ.get("RETRACTOR_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RETRACTOR_THREADS must be an integer, got {raw!r}")
    return max(n, 0)


def _map_jobs(fn, items):
    n = worker_count()
    if n <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Scenario plumbing.


def build_scenario(config: ExperimentConfig, index: int):
    """(mesh, scene) for one suite scenario.

    The boundary profile comes from the scenario seed; ROIs cycle when the
    config lists fewer of them than seeds.
    """
    seed = config.scenario_seeds[index]
    profile = generate_boundary_profile(config.profile_harmonics, seed=seed)
    mesh = build_tissue_mesh(
        profile, grid_dims=config.grid_dims, span=config.span,
        material=config.material,
    )
    roi = config.rois[index % len(config.rois)]
    scene = RetractionScene.create(mesh, config.camera, roi, config.layout)
    return mesh, scene


def nearest_boundary_node(mesh, x: float) -> np.ndarray:
    """Boundary node closest in x to the requested grasp coordinate."""
    pts = mesh.node_positions[mesh.boundary_order]
    return pts[int(np.argmin(np.abs(pts[:, 0] - x)))].copy()


def _capped_retraction(
    mesh, scene, model, config: ExperimentConfig, grasp_point, seed,
) -> EpisodeRecord:
    """Episode bounded by the sweep iteration cap plus a stall cutoff.

    Sweeps run 41 rollouts per scenario, so hopeless candidates must not
    burn the full controller budget: a candidate that has not improved its
    best occluded measure for `stall_window` iterations is cut off and
    counted as a failure.  The suite's final planned episode uses plain
    run_retraction instead; this path is sweep/oracle policy only.
    """
    ctrl = config.controller
    cap = min(ctrl.max_iterations, config.sweep_max_iters)
    rng = np.random.default_rng(seed)
    state = None
    diagnostic = None
    try:
        state = start_retraction(mesh, scene, model, ctrl, grasp_point, rng=rng)
        best = math.inf
        best_at = 0
        while not state.complete and state.iteration < cap:
            control_step(state, model, scene, ctrl, params=config.params)
            measure = state.history[-1].occluded_measure
            if measure < best - 1e-12:
                best = measure
                best_at = state.iteration
            if (
                config.stall_window
                and state.iteration - best_at >= config.stall_window
            ):
                diagnostic = (
                    f"stalled: no exposure progress in "
                    f"{config.stall_window} iterations"
                )
                break
    except (
        InsufficientObservationError,
        NumericalDivergenceError,
        ProjectionError,
        SingularGeometryError,
    ) as exc:
        diagnostic = f"{type(exc).__name__}: {exc}"
        log.warning("sweep episode aborted: %s", diagnostic)
        return EpisodeRecord(
            config=ctrl, seed=seed, success=False,
            iterations=state.iteration if state is not None else 0,
            steps=state.history if state is not None else [],
            diagnostic=diagnostic,
        )
    if not state.complete and diagnostic is None:
        diagnostic = f"iteration budget exhausted ({cap})"
    return EpisodeRecord(
        config=ctrl, seed=seed, success=state.complete,
        iterations=state.iteration, steps=state.history,
        diagnostic=None if state.complete else diagnostic,
    )


# ---------------------------------------------------------------------------
# Estimator evaluation.


def run_estimator_eval(config: ExperimentConfig, model) -> dict:
    """Boundary-prediction error versus retraction distance.

    Returns {distance: {"mcd", "mean", "p10", "p90"}} over fresh seeded
    scenarios; write_mcd_csv turns it into the metric table.
    """
    return evaluate_mcd(
        model,
        config.layout,
        trials=config.eval_trials,
        distances=config.eval_distances,
        seed=config.eval_seed,
        grid_dims=config.grid_dims,
        span=config.span,
        material=config.material,
        params=config.params,
        profile_harmonics=config.profile_harmonics,
    )


def write_mcd_csv(table: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "mean", "p10", "p90"])
        for d in sorted(table):
            row = table[d]
            writer.writerow([
                f"{d:.10e}", f"{row['mean']:.10e}",
                f"{row['p10']:.10e}", f"{row['p90']:.10e}",
            ])


# ---------------------------------------------------------------------------
# Grasp sweep.


@dataclass
class SweepResult:
    """Outcome of retracting from every candidate grasp position."""

    positions: np.ndarray       # strictly increasing, includes both ends
    success: list
    force: list                 # ground-truth grasp force at exposure, or None
    iterations: list
    planner_position: float | None
    planner_index: int | None
    planner_feasible: bool
    scenario_seed: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 1:
            raise InvalidParameterError("positions must be a 1-D array")
        if np.any(np.diff(self.positions) <= 0):
            raise InvalidParameterError("positions must be strictly increasing")
        n = len(self.positions)
        if not (len(self.success) == len(self.force) == len(self.iterations) == n):
            raise InvalidParameterError("per-candidate lists must match positions")
        for ok, f in zip(self.success, self.force):
            if not ok and f is not None:
                raise InvalidParameterError(
                    "failed candidates must not carry a force value"
                )

    def to_dict(self) -> dict:
        return {
            "schema_version": _SWEEP_SCHEMA,
            "scenario_seed": self.scenario_seed,
            "positions": [float(p) for p in self.positions],
            "success": list(self.success),
            "force": self.force,
            "iterations": self.iterations,
            "planner_position": self.planner_position,
            "planner_index": self.planner_index,
            "planner_feasible": self.planner_feasible,
        }


def run_grasp_sweep(
    config: ExperimentConfig, model, scenario_index: int = 0, seed: int = 0,
) -> SweepResult:
    """Retract from every grasp candidate on the 5 mm grid and overlay the
    planner's pick.

    Candidate positions span the sheet including both endpoints; each run
    grasps the boundary node nearest the candidate x.  Successful runs
    record the true grasp force at the exposure step; failures record no
    force.  The planner runs once on the same scenario and its pick is
    snapped to the candidate grid.
    """
    base_mesh, scene = build_scenario(config, scenario_index)
    count = int(round(config.span / config.sweep_spacing)) + 1
    positions = np.linspace(0.0, config.span, count)

    def one(i):
        mesh = base_mesh.copy()
        grasp_point = nearest_boundary_node(base_mesh, positions[i])
        bind_grasp(mesh, grasp_point)
        return _capped_retraction(
            mesh, scene, model, config, grasp_point, seed=[seed, i]
        )

    episodes = _map_jobs(one, range(count))
    success = [ep.success for ep in episodes]
    force = [
        ep.steps[-1].true_fmax if ep.success else None for ep in episodes
    ]
    iterations = [ep.iterations for ep in episodes]

    plan = optimize_grasp(
        base_mesh, scene, model, config.ga,
        force_limit=config.controller.force_limit,
    )
    if plan.feasible:
        planner_index = int(np.argmin(np.abs(positions - plan.q_x0)))
        planner_position = float(positions[planner_index])
    else:
        planner_index = None
        planner_position = None
    return SweepResult(
        positions=positions,
        success=success,
        force=force,
        iterations=iterations,
        planner_position=planner_position,
        planner_index=planner_index,
        planner_feasible=plan.feasible,
        scenario_seed=config.scenario_seeds[scenario_index],
    )


def write_sweep_csv(result: SweepResult, path) -> None:
    """Per-candidate table; force is blank for failed candidates."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "success", "force_at_exposure", "planner_pick"])
        for i, pos in enumerate(result.positions):
            writer.writerow([
                f"{pos:.10e}",
                int(result.success[i]),
                "" if result.force[i] is None else f"{result.force[i]:.10e}",
                int(result.planner_index == i),
            ])


def write_sweep_json(result: SweepResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
        fh.write("\n")


def read_sweep_json(path) -> SweepResult:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != _SWEEP_SCHEMA:
        raise InvalidParameterError(
            f"unsupported sweep schema {doc.get('schema_version')!r}"
        )
    return SweepResult(
        positions=np.asarray(doc["positions"], dtype=float),
        success=[bool(v) for v in doc["success"]],
        force=doc["force"],
        iterations=doc["iterations"],
        planner_position=doc["planner_position"],
        planner_index=doc["planner_index"],
        planner_feasible=doc["planner_feasible"],
        scenario_seed=doc["scenario_seed"],
    )


# ---------------------------------------------------------------------------
# End-to-end retraction suite.


@dataclass
class SuiteResult:
    """Per-scenario outcomes plus the success rate over feasible ones."""

    scenarios: list             # dicts, one per scenario, in seed order
    feasible_count: int
    success_count: int

    @property
    def success_rate(self) -> float:
        if self.feasible_count == 0:
            return math.nan
        return self.success_count / self.feasible_count

    def to_dict(self) -> dict:
        rate = self.success_rate
        return {
            "schema_version": _SUITE_SCHEMA,
            "scenarios": self.scenarios,
            "feasible_count": self.feasible_count,
            "success_count": self.success_count,
            "success_rate": None if math.isnan(rate) else rate,
        }


def classify_feasibility(
    config: ExperimentConfig, model, scenario_index: int,
) -> bool:
    """A scenario is feasible iff some grasp candidate on the 5 mm grid
    reaches exposure under the configured controller.  Stops at the first
    success; candidate order is deterministic so the short-circuit does
    not change the verdict."""
    base_mesh, scene = build_scenario(config, scenario_index)
    count = int(round(config.span / config.sweep_spacing)) + 1
    positions = np.linspace(0.0, config.span, count)
    seed = config.scenario_seeds[scenario_index]
    for i, x in enumerate(positions):
        mesh = base_mesh.copy()
        grasp_point = nearest_boundary_node(base_mesh, x)
        bind_grasp(mesh, grasp_point)
        episode = _capped_retraction(
            mesh, scene, model, config, grasp_point, seed=[seed, 0, i]
        )
        if episode.success:
            return True
    return False


def run_retraction_suite(config: ExperimentConfig, model) -> SuiteResult:
    """Plan-then-retract over every scenario seed.

    Each scenario is first classified feasible/infeasible by the exhaustive
    grasp oracle; infeasible ones are recorded but excluded from the
    success-rate denominator.  Feasible ones get a planned grasp and a full
    controller run at the configured iteration budget.
    """

    def one(index):
        seed = config.scenario_seeds[index]
        feasible = classify_feasibility(config, model, index)
        row = {
            "seed": seed,
            "feasible": feasible,
            "planned_q_x0": None,
            "success": None,
            "iterations": None,
            "peak_force": None,
            "diagnostic": None,
        }
        if not feasible:
            return row
        mesh, scene = build_scenario(config, index)
        ga = dataclasses.replace(config.ga, seed=seed)
        plan = optimize_grasp(
            mesh, scene, model, ga, force_limit=config.controller.force_limit
        )
        if not plan.feasible:
            row["success"] = False
            row["diagnostic"] = "planner found no feasible grasp"
            return row
        grasp_point = nearest_boundary_node(mesh, plan.q_x0)
        row["planned_q_x0"] = float(grasp_point[0])
        bind_grasp(mesh, grasp_point)
        episode = run_retraction(
            mesh, scene, model, config.controller, grasp_point,
            params=config.params, seed=[seed, 1],
        )
        row["success"] = episode.success
        row["iterations"] = episode.iterations
        row["diagnostic"] = episode.diagnostic
        if episode.steps:
            row["peak_force"] = float(
                max(step.true_fmax for step in episode.steps)
            )
        return row

    scenarios = _map_jobs(one, range(len(config.scenario_seeds)))
    feasible_count = sum(1 for row in scenarios if row["feasible"])
    success_count = sum(
        1 for row in scenarios if row["feasible"] and row["success"]
    )
    return SuiteResult(
        scenarios=scenarios,
        feasible_count=feasible_count,
        success_count=success_count,
    )


def write_suite_csv(result: SuiteResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "scenario_seed", "feasible", "planned_q_x0", "success",
            "iterations", "peak_force",
        ])
        for row in result.scenarios:
            writer.writerow([
                row["seed"],
                int(row["feasible"]),
                "" if row["planned_q_x0"] is None else f"{row['planned_q_x0']:.10e}",
                "" if row["success"] is None else int(row["success"]),
                "" if row["iterations"] is None else row["iterations"],
                "" if row["peak_force"] is None else f"{row['peak_force']:.10e}",
            ])


# ---------------------------------------------------------------------------
# Dataset and training plumbing for the CLI.


def run_dataset_generation(config: ExperimentConfig, path):
    """Generate the scripted-pull dataset named by the config and write it
    as JSON-Lines; returns (sample count, skipped pairs)."""
    samples, skipped = generate_dataset(
        config.layout,
        counts=config.dataset_counts,
        seed=config.dataset_seed,
        grid_dims=config.grid_dims,
        span=config.span,
        material=config.material,
        params=config.params,
        profile_harmonics=config.profile_harmonics,
    )
    write_dataset(samples, config.layout, path)
    return len(samples), skipped


# ---------------------------------------------------------------------------
# Reporting.


def emit_report(
    out_dir,
    mcd_table: dict | None = None,
    suite: SuiteResult | None = None,
    sweeps=(),
    acceptance: dict | None = None,
) -> dict:
    """Write CSV tables plus summary.json; returns {name: path}.

    The summary always carries every acceptance-criterion ID exactly once;
    criteria without a reported verdict read "not-run".  Output is a pure
    function of the inputs, so a rerun overwrites byte-identically.
    """
    acceptance = acceptance or {}
    unknown = set(acceptance) - set(ACCEPTANCE_IDS)
    if unknown:
        raise InvalidParameterError(
            f"unknown acceptance criteria: {sorted(unknown)}"
        )
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    if mcd_table is not None:
        paths["mcd"] = os.path.join(out_dir, "mcd.csv")
        write_mcd_csv(mcd_table, paths["mcd"])
    if suite is not None:
        paths["suite"] = os.path.join(out_dir, "suite.csv")
        write_suite_csv(suite, paths["suite"])
    for k, sweep in enumerate(sweeps):
        key = f"sweep_{k}"
        paths[key] = os.path.join(out_dir, f"{key}.csv")
        write_sweep_csv(sweep, paths[key])

    metrics = {}
    if mcd_table is not None:
        # per-trial arrays are present on fresh tables but not on tables
        # reread from mcd.csv; the median column degrades to null there
        metrics["mcd"] = {
            f"{d:.4f}": {
                "mean": float(row["mean"]),
                "median": (
                    float(np.median(row["mcd"])) if "mcd" in row else None
                ),
                "p10": float(row["p10"]),
                "p90": float(row["p90"]),
            }
            for d, row in sorted(mcd_table.items())
        }
    if suite is not None:
        rate = suite.success_rate
        metrics["suite_success_rate"] = None if math.isnan(rate) else rate
    if sweeps:
        medians = []
        for sweep in sweeps:
            forces = [f for f in sweep.force if f is not None]
            medians.append(float(np.median(forces)) if forces else None)
        metrics["sweep_force_median"] = medians

    summary = {
        "schema_version": _REPORT_SCHEMA,
        "suite": suite.to_dict() if suite is not None else None,
        "seeds": {
            "suite": [row["seed"] for row in suite.scenarios] if suite else [],
            "sweeps": [sweep.scenario_seed for sweep in sweeps],
        },
        "metrics": metrics,
        "acceptance": {
            cid: (
                "not-run" if cid not in acceptance
                else ("pass" if acceptance[cid] else "fail")
            )
            for cid in ACCEPTANCE_IDS
        },
    }
    paths["summary"] = os.path.join(out_dir, "summary.json")
    with open(paths["summary"], "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return paths
