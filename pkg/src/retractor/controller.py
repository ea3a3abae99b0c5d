"""Closed-loop retraction: adaptive Jacobian servoing on the visual boundary.

Each iteration observes the boundary curve in {E}, refines a linear map
from instrument pose increments to curve-weight increments using the
previous commanded step, then descends the occlusion loss through that
map.  A quadratic penalty on the predicted grasp force pushes back when
the network expects the safety limit to be exceeded.  Steps are clamped
to per-axis-group velocity limits before being sent to the simulator.
The episode ends when the occluded domain is empty or the iteration
budget runs out.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from retractor.errors import (
    InsufficientObservationError,
    InvalidParameterError,
    InvalidStateError,
    NumericalDivergenceError,
    ProjectionError,
    ShapeError,
    SingularGeometryError,
)
from retractor.estimator import DeformationModel, forward, input_gradient, predict
from retractor.mesh import (
    InstrumentPose,
    SimParams,
    TissueMesh,
    apply_instrument,
    max_grasp_force,
    settle,
)
from retractor.rbf import fit_boundary_3d, occlusion_gradient
from retractor.scene import RetractionScene, transform_params_to_E

log = logging.getLogger("retractor.controller")

_EPISODE_SCHEMA = 1

# Relative slack before the velocity clamp kicks in, so re-clamping an
# already clamped step is a bit-exact no-op.
_CLAMP_SLACK = 1e-12


# ---------------------------------------------------------------------------
# Jacobian estimate.


@dataclass
class JacobianEstimate:
    """Linear map from pose increments (6) to {E} weight increments (m)."""

    matrix: np.ndarray
    rate: float                 # adaptation gain

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != 6:
            raise ShapeError(f"Jacobian must be (m, 6), got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise InvalidParameterError("non-finite Jacobian entries")
        if not self.rate > 0:
            raise InvalidParameterError(f"adaptation rate must be > 0, got {self.rate}")

    @property
    def m(self) -> int:
        return self.matrix.shape[0]


def update_jacobian(estimate: JacobianEstimate, delta_q, delta_w, rate=None):
    """One rank-one adaptation step; returns a new estimate.

    With e = J dq - dw, the update J <- J - rate * outer(e, dq) shrinks the
    prediction error on the same pair to e * (1 - rate * |dq|^2), so it
    contracts whenever 0 < rate * |dq|^2 < 2.
    """
    rate = estimate.rate if rate is None else float(rate)
    delta_q = np.asarray(delta_q, dtype=float)
    delta_w = np.asarray(delta_w, dtype=float)
    if delta_q.shape != (6,):
        raise ShapeError(f"pose increment must be a 6-vector, got {delta_q.shape}")
    if delta_w.shape != (estimate.m,):
        raise ShapeError(
            f"weight increment must be ({estimate.m},), got {delta_w.shape}"
        )
    error = estimate.matrix @ delta_q - delta_w
    matrix = estimate.matrix - rate * np.outer(error, delta_q)
    return JacobianEstimate(matrix=matrix, rate=estimate.rate)


# ---------------------------------------------------------------------------
# Configuration.


@dataclass
class ControllerConfig:
    """Gains and limits for one episode.

    ``force_limit`` is the safety threshold on the predicted grasp force;
    ``inf`` disables the penalty entirely.  The penalty gain is expressed
    directly (kappa2 = tau * kappa1 for some tau >= 0).
    """

    gain: float = 5e-3                  # kappa1, occlusion descent
    force_gain: float = 1e-5            # kappa2, force penalty
    adaptation_rate: float = 2e4        # Jacobian update gain
    max_linear_step: float = 1e-3       # meters per iteration
    max_angular_step: float = 1e-2      # radians per iteration
    force_limit: float = math.inf
    init_samples: int = 12              # rollouts for the initial Jacobian
    perturb_translation: float = 5e-3   # meters, per axis
    perturb_rotation: float = 0.05      # radians, per axis
    max_iterations: int = 2000

    def __post_init__(self):
        if not self.gain > 0:
            raise InvalidParameterError(f"gain must be > 0, got {self.gain}")
        if self.force_gain < 0:
            raise InvalidParameterError(
                f"force gain must be >= 0, got {self.force_gain}"
            )
        if not self.adaptation_rate > 0:
            raise InvalidParameterError(
                f"adaptation rate must be > 0, got {self.adaptation_rate}"
            )
        if not (self.max_linear_step > 0 and self.max_angular_step > 0):
            raise InvalidParameterError("step limits must be > 0")
        if math.isnan(self.force_limit) or self.force_limit < 0:
            raise InvalidParameterError(
                f"force limit must be >= 0, got {self.force_limit}"
            )
        if self.init_samples < 6:
            raise InvalidParameterError(
                f"need at least 6 initialization samples, got {self.init_samples}"
            )
        if not (self.perturb_translation > 0 and self.perturb_rotation > 0):
            raise InvalidParameterError("perturbation scales must be > 0")
        if self.max_iterations < 1:
            raise InvalidParameterError(
                f"max iterations must be >= 1, got {self.max_iterations}"
            )

    def to_dict(self) -> dict:
        return {
            "gain": self.gain,
            "force_gain": self.force_gain,
            "adaptation_rate": self.adaptation_rate,
            "max_linear_step": self.max_linear_step,
            "max_angular_step": self.max_angular_step,
            # JSON has no Infinity; null means "penalty disabled"
            "force_limit": None if math.isinf(self.force_limit) else self.force_limit,
            "init_samples": self.init_samples,
            "perturb_translation": self.perturb_translation,
            "perturb_rotation": self.perturb_rotation,
            "max_iterations": self.max_iterations,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ControllerConfig":
        doc = dict(doc)
        if doc.get("force_limit") is None:
            doc["force_limit"] = math.inf
        return cls(**doc)


def force_limit_from_samples(samples, fraction: float = 0.8, percentile: float = 95.0):
    """Safety threshold picked from a training set's force distribution."""
    if len(samples) == 0:
        raise InvalidParameterError("no samples to derive a force limit from")
    values = np.array([s.target_fmax for s in samples], dtype=float)
    return float(fraction * np.percentile(values, percentile))


# ---------------------------------------------------------------------------
# Control laws.


def predict_visual_weights(model, scene: RetractionScene, w_x0, q, q_x0):
    """Model rollout mapped into {E}: predicted curve weights at pose q."""
    params, _ = predict(model, w_x0, q, q_x0, scene.layout, scene.baseline)
    return transform_params_to_E(params, scene.camera, scene.frame, scene.layout)


def init_jacobian(
    model,
    scene,
    q0,
    config: ControllerConfig,
    w_x0=None,
    q_x0=None,
    rng=None,
) -> JacobianEstimate:
    """Least-squares Jacobian from model rollouts around the start pose.

    Draws ``config.init_samples`` pose increments uniform in the per-axis
    perturbation boxes, predicts the {E} boundary weights at each, and
    solves  J0 = dW Q^T (Q Q^T)^-1  against the prediction at q0 itself.
    A singular increment matrix is resampled once, then reported.

    ``model`` may also be a bare callable mapping a pose 6-vector to an
    m-vector of weights (bypassing the scene transform); surrogate models
    in the planner and tests use that form.
    """
    if callable(model):
        weights_at = model
    else:
        weights_at = lambda q: predict_visual_weights(model, scene, w_x0, q, q_x0)
    q0 = np.asarray(q0, dtype=float)
    if q0.shape != (6,):
        raise ShapeError(f"start pose must be a 6-vector, got {q0.shape}")
    rng = np.random.default_rng(0) if rng is None else rng
    scales = np.array(
        [config.perturb_translation] * 3 + [config.perturb_rotation] * 3
    )
    base = np.asarray(weights_at(q0), dtype=float)
    for attempt in range(2):
        increments = rng.uniform(-1.0, 1.0, size=(config.init_samples, 6)) * scales
        delta_w = np.stack(
            [np.asarray(weights_at(q0 + dq), dtype=float) - base for dq in increments],
            axis=1,
        )                                       # (m, nu)
        q_mat = increments.T                    # (6, nu)
        gram = q_mat @ q_mat.T
        try:
            solved = np.linalg.solve(gram, q_mat @ delta_w.T)
        except np.linalg.LinAlgError:
            log.warning("singular initialization increments, resampling (%d)", attempt)
            continue
        if np.all(np.isfinite(solved)):
            return JacobianEstimate(matrix=solved.T, rate=config.adaptation_rate)
    raise SingularGeometryError("initialization increments are rank deficient")


def control_gradient(jacobian, loss_gradient, gain: float) -> np.ndarray:
    """Pose step u = -gain * J^T dL/dw (unclamped)."""
    matrix = jacobian.matrix if isinstance(jacobian, JacobianEstimate) else (
        np.asarray(jacobian, dtype=float)
    )
    loss_gradient = np.asarray(loss_gradient, dtype=float)
    if matrix.ndim != 2 or loss_gradient.shape != (matrix.shape[0],):
        raise ShapeError(
            f"gradient shape {loss_gradient.shape} does not match map {matrix.shape}"
        )
    return -gain * (matrix.T @ loss_gradient)


def force_penalty(f_hat: float, force_limit: float) -> float:
    """Quadratic hinge on the predicted force: (F - limit)^2 past the limit."""
    excess = f_hat - force_limit
    return excess * excess if excess > 0 else 0.0


def force_penalty_gradient(model: DeformationModel, x, force_limit, force_gain):
    """Pose-space penalty step; exactly zero while the prediction is safe.

    ``x`` is the full network input at the current pose.  Past the limit
    the step is -force_gain * 2 (F - limit) dF/dq, with dF/dq read off the
    exact input gradient restricted to the six pose components.
    """
    x = np.asarray(x, dtype=float)
    m = model.m
    f_hat = float(forward(model, x)[3 * m])
    if f_hat <= force_limit:
        return np.zeros(6)
    grad_q = input_gradient(model, x, 3 * m)[m:m + 6]
    return -force_gain * 2.0 * (f_hat - force_limit) * grad_q


def limit_velocity(u, max_linear: float, max_angular: float) -> np.ndarray:
    """Clamp the linear and angular halves to their norm limits separately."""
    u = np.asarray(u, dtype=float)
    if u.shape != (6,):
        raise ShapeError(f"command must be a 6-vector, got {u.shape}")
    out = u.copy()
    for sl, cap in ((slice(0, 3), max_linear), (slice(3, 6), max_angular)):
        norm = float(np.linalg.norm(out[sl]))
        if norm > cap * (1.0 + _CLAMP_SLACK):
            out[sl] *= cap / norm
    return out


# ---------------------------------------------------------------------------
# Episode state and loop.


@dataclass
class StepRecord:
    """What the controller saw at the start of one iteration."""

    pose: np.ndarray            # commanded pose when observing, (6,)
    weights: np.ndarray         # constrained visual-boundary fit, (m,)
    occluded_measure: float
    loss: float                 # occlusion loss + tau * force penalty
    predicted_fmax: float
    true_fmax: float
    adaptation_error: float     # |J dq - dw| before this step's update, nan at t=0


@dataclass
class ControlState:
    """Mutable loop state; control_step advances it in place."""

    mesh: TissueMesh
    pose: np.ndarray
    jacobian: JacobianEstimate
    w_x0: np.ndarray            # episode constants fed to the network
    q_x0: float
    prev_step: np.ndarray | None = None
    prev_weights: np.ndarray | None = None
    iteration: int = 0
    complete: bool = False
    history: list = field(default_factory=list)


def start_retraction(
    mesh: TissueMesh,
    scene: RetractionScene,
    model,
    config: ControllerConfig,
    grasp_point,
    rng=None,
) -> ControlState:
    """Episode setup: fit the undeformed boundary, place the instrument at
    the grasp, and initialize the Jacobian from model rollouts."""
    if len(mesh.grasped_indices) == 0:
        raise InvalidStateError("bind a grasp before starting retraction")
    grasp_point = np.asarray(grasp_point, dtype=float)
    if grasp_point.shape != (3,):
        raise ShapeError(f"grasp point must be a 3-vector, got {grasp_point.shape}")
    fit = fit_boundary_3d(
        mesh.node_positions[mesh.boundary_order], scene.layout, baseline=scene.baseline
    )
    w_x0 = fit.weights[:, 0].copy()
    q_x0 = float(grasp_point[0])
    pose0 = np.concatenate([grasp_point, np.zeros(3)])
    jacobian = init_jacobian(model, scene, pose0, config, w_x0, q_x0, rng=rng)
    return ControlState(
        mesh=mesh, pose=pose0, jacobian=jacobian, w_x0=w_x0, q_x0=q_x0
    )


def control_step(
    state: ControlState,
    model: DeformationModel,
    scene: RetractionScene,
    config: ControllerConfig,
    params: SimParams | None = None,
) -> ControlState:
    """One loop iteration: observe, adapt, descend, clamp, command, settle.

    When the observation shows the target already exposed the state is
    flagged complete and no motion is commanded.  Observation and simulator
    failures propagate; run_retraction turns them into a failed episode.
    """
    if state.complete:
        return state
    obs = scene.observe(state.mesh)

    adaptation_error = math.nan
    if state.prev_step is not None:
        error = state.jacobian.matrix @ state.prev_step - (
            obs.weights - state.prev_weights
        )
        adaptation_error = float(np.linalg.norm(error))
        state.jacobian = update_jacobian(
            state.jacobian, state.prev_step, obs.weights - state.prev_weights
        )

    occ_grad = occlusion_gradient(scene.layout, obs.overlap.intervals)
    x = np.concatenate([state.w_x0, state.pose, [state.q_x0]])
    predicted_fmax = max(float(forward(model, x)[3 * model.m]), 0.0)
    tau = config.force_gain / config.gain
    state.history.append(StepRecord(
        pose=state.pose.copy(),
        weights=obs.weights,
        occluded_measure=obs.overlap.measure,
        loss=float(obs.weights @ occ_grad)
        + tau * force_penalty(predicted_fmax, config.force_limit),
        predicted_fmax=predicted_fmax,
        true_fmax=max_grasp_force(state.mesh),
        adaptation_error=adaptation_error,
    ))

    if obs.overlap.is_empty:
        state.complete = True
        return state

    u = control_gradient(state.jacobian, occ_grad, config.gain)
    u = u + force_penalty_gradient(model, x, config.force_limit, config.force_gain)
    u = limit_velocity(u, config.max_linear_step, config.max_angular_step)

    next_pose = state.pose + u
    apply_instrument(
        state.mesh,
        InstrumentPose.from_vector(state.pose),
        InstrumentPose.from_vector(next_pose),
    )
    settle(state.mesh, params or SimParams())
    state.prev_step = u
    state.prev_weights = obs.weights
    state.pose = next_pose
    state.iteration += 1
    return state


@dataclass
class EpisodeRecord:
    """Everything one retraction run produced."""

    config: ControllerConfig
    seed: int
    success: bool
    iterations: int
    steps: list
    diagnostic: str | None = None

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.steps])

    def to_dict(self) -> dict:
        return {
            "schema_version": _EPISODE_SCHEMA,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "success": self.success,
            "iterations": self.iterations,
            "diagnostic": self.diagnostic,
            "poses": [list(s.pose) for s in self.steps],
            "occluded_measure": [s.occluded_measure for s in self.steps],
            "loss": [s.loss for s in self.steps],
            "fmax_predicted": [s.predicted_fmax for s in self.steps],
            "fmax_true": [s.true_fmax for s in self.steps],
            # nan marks "no update that step"; keep the file strict JSON
            "adaptation_error": [
                None if math.isnan(s.adaptation_error) else s.adaptation_error
                for s in self.steps
            ],
        }


def run_retraction(
    mesh: TissueMesh,
    scene: RetractionScene,
    model: DeformationModel,
    config: ControllerConfig,
    grasp_point,
    params: SimParams | None = None,
    seed: int = 0,
) -> EpisodeRecord:
    """Full episode on an already grasped mesh.

    Loops control_step until the target is exposed or the iteration budget
    is spent; success is claimed only off an observed empty overlap domain.
    Simulation or observation blowups end the episode as a failure with a
    diagnostic instead of raising.
    """
    rng = np.random.default_rng(seed)
    diagnostic = None
    state = None
    try:
        state = start_retraction(mesh, scene, model, config, grasp_point, rng=rng)
        while not state.complete and state.iteration < config.max_iterations:
            control_step(state, model, scene, config, params=params)
    except (
        InsufficientObservationError,
        NumericalDivergenceError,
        ProjectionError,
        SingularGeometryError,
    ) as exc:
        diagnostic = f"{type(exc).__name__}: {exc}"
        log.warning("episode aborted: %s", diagnostic)
        return EpisodeRecord(
            config=config,
            seed=seed,
            success=False,
            iterations=state.iteration if state is not None else 0,
            steps=state.history if state is not None else [],
            diagnostic=diagnostic,
        )
    if not state.complete:
        diagnostic = f"iteration budget exhausted ({config.max_iterations})"
    return EpisodeRecord(
        config=config,
        seed=seed,
        success=state.complete,
        iterations=state.iteration,
        steps=state.history,
        diagnostic=diagnostic,
    )


# ---------------------------------------------------------------------------
# Persistence.


def write_episode(record: EpisodeRecord, path) -> None:
    with open(path, "w") as fh:
        json.dump(record.to_dict(), fh, indent=2)
        fh.write("\n")


def read_episode(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != _EPISODE_SCHEMA:
        raise InvalidParameterError(
            f"unsupported episode schema {doc.get('schema_version')!r}"
        )
    return doc


def write_episode_csv(record: EpisodeRecord, path) -> None:
    """Per-iteration time series, one row per observation."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "qx", "qy", "qz", "qrx", "qry", "qrz",
             "occluded_measure", "loss", "fmax_predicted", "fmax_true",
             "adaptation_error"]
        )
        for i, s in enumerate(record.steps):
            writer.writerow(
                [i] + [f"{v:.10e}" for v in s.pose]
                + [f"{s.occluded_measure:.10e}", f"{s.loss:.10e}",
                   f"{s.predicted_fmax:.10e}", f"{s.true_fmax:.10e}",
                   f"{s.adaptation_error:.10e}"]
            )
