"""Preoperative grasp selection by a seeded genetic algorithm.

A genome is (grasp coordinate, probe action): where to pinch the carved
edge and a small trial pose offset.  The score is the predicted change
of the visual boundary, projected onto a blend of the occlusion-loss
gradient over the currently occluded intervals and over the whole
domain, plus a log barrier that walls off probes whose predicted grasp
force reaches the safety limit.  The model never runs the simulator
here; planning stays cheap and the exhaustive sweep in the harness
provides the ground truth to compare against.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from retractor.errors import InvalidParameterError, RetractorError, ShapeError
from retractor.estimator import forward, sample_pull_direction
from retractor.controller import predict_visual_weights
from retractor.rbf import fit_boundary_3d, occlusion_gradient
from retractor.scene import RetractionScene

log = logging.getLogger("retractor.planner")

_RESULT_SCHEMA = 1
_FULL_DOMAIN = ((0.0, 1.0),)


# ---------------------------------------------------------------------------
# Types.


@dataclass
class GraspCandidate:
    """One genome: grasp coordinate along the boundary plus probe action."""

    q_x0: float
    action: np.ndarray          # probe pose offset, (6,)
    fitness: float              # +inf marks an infeasible candidate

    def __post_init__(self):
        self.action = np.asarray(self.action, dtype=float)
        if self.action.shape != (6,):
            raise ShapeError(f"probe action must be a 6-vector, got {self.action.shape}")
        if math.isnan(self.fitness):
            raise InvalidParameterError("fitness must be a number or +inf")

    def genome(self) -> np.ndarray:
        return np.concatenate([[self.q_x0], self.action])


@dataclass
class GaConfig:
    """Genetic-algorithm settings and objective weights."""

    population: int = 64
    generations: int = 60
    tournament: int = 3
    crossover_rate: float = 0.8
    mutation_rate: float = 0.1
    mutation_grasp: float = 2e-3        # meters along the boundary
    mutation_translation: float = 5e-3  # meters per axis
    mutation_rotation: float = 0.05     # radians per axis
    barrier_t: float = 100.0
    epsilon: float = 0.9                # exposure weight between D and [0,1]
    translation_bound: float = 0.1      # probe stays at dataset pull scale
    # scripted pulls never rotate the instrument, so probe rotations are
    # pinned near zero to keep the network in-distribution
    rotation_bound: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.population < 4:
            raise InvalidParameterError(
                f"population must be >= 4, got {self.population}"
            )
        if self.generations < 1:
            raise InvalidParameterError(
                f"generations must be >= 1, got {self.generations}"
            )
        if not 1 <= self.tournament <= self.population:
            raise InvalidParameterError(
                f"tournament size {self.tournament} outside [1, population]"
            )
        for name in ("crossover_rate", "mutation_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidParameterError(
                f"epsilon must lie in [0, 1], got {self.epsilon}"
            )
        if not self.barrier_t > 0:
            raise InvalidParameterError(
                f"barrier parameter must be > 0, got {self.barrier_t}"
            )
        for name in ("mutation_grasp", "mutation_translation", "mutation_rotation",
                     "translation_bound", "rotation_bound"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be > 0")

    def to_dict(self) -> dict:
        return {
            "population": self.population,
            "generations": self.generations,
            "tournament": self.tournament,
            "crossover_rate": self.crossover_rate,
            "mutation_rate": self.mutation_rate,
            "mutation_grasp": self.mutation_grasp,
            "mutation_translation": self.mutation_translation,
            "mutation_rotation": self.mutation_rotation,
            "barrier_t": self.barrier_t,
            "epsilon": self.epsilon,
            "translation_bound": self.translation_bound,
            "rotation_bound": self.rotation_bound,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaConfig":
        return cls(**doc)


# ---------------------------------------------------------------------------
# Objective pieces.


def barrier(f_hat_max: float, force_limit: float, t: float) -> float:
    """Log barrier on the force margin: +inf at or past the limit."""
    if not t > 0:
        raise InvalidParameterError(f"barrier parameter must be > 0, got {t}")
    margin = f_hat_max - force_limit
    if margin >= 0:
        return math.inf
    return -math.log(-margin) / t


def grasp_objective(
    q_x0: float,
    action,
    model,
    scene: RetractionScene,
    epsilon: float,
    w_x0,
    boundary_points,
    intervals,
) -> float:
    """Predicted exposure improvement of one probe from one grasp point.

    The probe's predicted weight change (relative to the model's own
    rest-pose prediction, so a zero action scores exactly zero) is
    projected onto the blended occlusion gradient: `epsilon` parts the
    gradient over the occluded intervals, the rest over the whole [0, 1]
    domain.  Negative values mean the probe lowers the curve where it
    matters.
    """
    action = np.asarray(action, dtype=float)
    if action.shape != (6,):
        raise ShapeError(f"probe action must be a 6-vector, got {action.shape}")
    pose0 = _anchor_pose(boundary_points, q_x0)
    probe = pose0.copy()
    probe[:3] += action[:3]
    probe[3:] += action[3:]
    w_base = predict_visual_weights(model, scene, w_x0, pose0, q_x0)
    w_probe = predict_visual_weights(model, scene, w_x0, probe, q_x0)
    grad = epsilon * occlusion_gradient(scene.layout, intervals)
    grad = grad + (1.0 - epsilon) * occlusion_gradient(scene.layout, _FULL_DOMAIN)
    return float((w_probe - w_base) @ grad)


def _anchor_pose(boundary_points, q_x0: float) -> np.ndarray:
    """Rest instrument pose for a grasp at coordinate q_x0: on the initial
    boundary curve, zero orientation."""
    pts = np.asarray(boundary_points, dtype=float)
    order = np.argsort(pts[:, 0])
    xs = pts[order, 0]
    pos = np.array([
        q_x0,
        np.interp(q_x0, xs, pts[order, 1]),
        np.interp(q_x0, xs, pts[order, 2]),
    ])
    return np.concatenate([pos, np.zeros(3)])


# ---------------------------------------------------------------------------
# The solver.


@dataclass
class PlannerResult:
    q_x0: float
    probe_q: np.ndarray
    fitness: float
    feasible: bool
    generations_run: int
    best_per_generation: list

    def to_dict(self) -> dict:
        return {
            "schema_version": _RESULT_SCHEMA,
            "q_x0": self.q_x0,
            "probe_q": list(self.probe_q),
            # null encodes +inf (no feasible genome)
            "fitness": None if math.isinf(self.fitness) else self.fitness,
            "feasible": self.feasible,
            "generations_run": self.generations_run,
        }


def optimize_grasp(
    mesh,
    scene: RetractionScene,
    model,
    config: GaConfig,
    force_limit: float = math.inf,
    objective=None,
) -> PlannerResult:
    """Seeded GA over (grasp coordinate, probe action).

    Tournament selection, per-gene blend crossover, Gaussian mutation with
    per-gene scales, one elite carried over unchanged.  Infeasible genomes
    (infinite fitness) never beat feasible ones under minimization.  An
    infinite ``force_limit`` disables the barrier term.  ``objective`` may
    replace the model-based fitness with any genome -> float callable
    (surrogate studies); bounds still come from the mesh boundary.
    Returns the best genome of the final population; ``feasible`` is False
    when every genome stayed infinite.
    """
    rng = np.random.default_rng(config.seed)
    boundary = mesh.node_positions[mesh.boundary_order]
    x_lo = float(boundary[:, 0].min())
    x_hi = float(boundary[:, 0].max())

    if objective is None:
        w_x0 = fit_boundary_3d(
            boundary, scene.layout, baseline=scene.baseline
        ).weights[:, 0].copy()
        intervals = scene.observe(mesh).overlap.intervals

        def objective(genome):
            q_x0, action = genome[0], genome[1:]
            try:
                score = grasp_objective(
                    q_x0, action, model, scene, config.epsilon,
                    w_x0, boundary, intervals,
                )
            except RetractorError as exc:
                # a probe whose predicted curve cannot even be projected
                # is as infeasible as one past the force limit
                log.debug("probe prediction failed, scoring inf: %s", exc)
                return math.inf
            if math.isinf(force_limit):
                return score
            pose = _anchor_pose(boundary, q_x0)
            pose[:3] += action[:3]
            pose[3:] += action[3:]
            x = np.concatenate([w_x0, pose, [q_x0]])
            f_hat = max(float(forward(model, x)[3 * model.m]), 0.0)
            return score + barrier(f_hat, force_limit, config.barrier_t)

    scales = np.array(
        [config.mutation_grasp]
        + [config.mutation_translation] * 3
        + [config.mutation_rotation] * 3
    )

    def clamp(genome):
        # probes stay inside the pull dataset's support: upward, within
        # 60 degrees of the outward edge normal, magnitude under the bound
        genome[0] = min(max(genome[0], x_lo), x_hi)
        genome[3] = max(genome[3], 0.0)
        side = math.hypot(genome[1], genome[3])
        if genome[2] < side / math.sqrt(3.0):
            genome[2] = side / math.sqrt(3.0)
        norm = float(np.linalg.norm(genome[1:4]))
        if norm > config.translation_bound:
            genome[1:4] *= config.translation_bound / norm
        genome[4:7] = np.clip(
            genome[4:7], -config.rotation_bound, config.rotation_bound
        )
        return genome

    def tournament(fitness):
        picks = rng.integers(0, config.population, size=config.tournament)
        return picks[int(np.argmin(fitness[picks]))]

    genomes = np.empty((config.population, 7))
    genomes[:, 0] = rng.uniform(x_lo, x_hi, size=config.population)
    for i in range(config.population):
        genomes[i, 1:4] = sample_pull_direction(rng) * rng.uniform(
            0.0, config.translation_bound
        )
    genomes[:, 4:7] = rng.uniform(
        -config.rotation_bound, config.rotation_bound, size=(config.population, 3)
    )
    for i in range(config.population):
        clamp(genomes[i])
    fitness = np.array([objective(g) for g in genomes])
    best_history = [float(fitness.min())]

    for _ in range(config.generations):
        elite = int(np.argmin(fitness))
        new_genomes = [genomes[elite].copy()]
        new_fitness = [float(fitness[elite])]
        while len(new_genomes) < config.population:
            pa = genomes[tournament(fitness)]
            pb = genomes[tournament(fitness)]
            if rng.uniform() < config.crossover_rate:
                mix = rng.uniform(size=7)
                child = mix * pa + (1.0 - mix) * pb
            else:
                child = pa.copy()
            mask = rng.uniform(size=7) < config.mutation_rate
            child = child + mask * rng.normal(size=7) * scales
            clamp(child)
            new_genomes.append(child)
            new_fitness.append(float(objective(child)))
        genomes = np.array(new_genomes)
        fitness = np.array(new_fitness)
        best_history.append(float(fitness.min()))

    best = int(np.argmin(fitness))
    best_fitness = float(fitness[best])
    feasible = math.isfinite(best_fitness)
    if not feasible:
        log.warning("no feasible grasp found after %d generations",
                    config.generations)
    return PlannerResult(
        q_x0=float(genomes[best, 0]),
        probe_q=genomes[best, 1:].copy(),
        fitness=best_fitness,
        feasible=feasible,
        generations_run=config.generations,
        best_per_generation=best_history,
    )


# ---------------------------------------------------------------------------
# Persistence.


def write_planner_result(result: PlannerResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
        fh.write("\n")


def read_planner_result(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != _RESULT_SCHEMA:
        raise InvalidParameterError(
            f"unsupported planner schema {doc.get('schema_version')!r}"
        )
    return doc


def write_fitness_curve(result: PlannerResult, path) -> None:
    """Best fitness after initialization and after each generation."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["generation", "best_fitness"])
        for gen, value in enumerate(result.best_per_generation):
            writer.writerow([gen, f"{value:.10e}"])
