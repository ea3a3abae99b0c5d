"""Learned deformation model: pose in, boundary weights and grasp force out.

The dataset comes from scripted pulls on the spring sheet: bind a grasp on
the carved edge, drag it 10 cm along a random safe direction, settle after
every increment, and record the fitted boundary weights and peak grasp
force at each step.  A small fully-connected network with leaky-rectifier
hidden units regresses (initial x-residual weights, pose, grasp x) onto
(all boundary weights, max force).  Exact input gradients of any output
component are available for the controller's force penalty.
"""

import copy
import json
import logging
from dataclasses import dataclass

import numpy as np

from retractor.errors import (
    InvalidParameterError,
    NumericalDivergenceError,
    ShapeError,
    TrainingDivergedError,
)
from retractor.mesh import (
    InstrumentPose,
    SimParams,
    bind_grasp,
    apply_instrument,
    build_tissue_mesh,
    generate_boundary_profile,
    max_grasp_force,
    settle,
)
from retractor.rbf import (
    BoundaryParams3D,
    KernelLayout,
    eval_curve_3d,
    fit_boundary_3d,
)

log = logging.getLogger("retractor.estimator")

_DATASET_SCHEMA = 1
_MODEL_SCHEMA = 1
_NEGATIVE_SLOPE = 0.01


# ---------------------------------------------------------------------------
# Samples and dataset files.


@dataclass
class Sample:
    """One settled step of one pull."""

    w_x0: np.ndarray        # (m,) x-residual weights of the initial boundary fit
    q: np.ndarray           # (6,) absolute instrument pose
    q_x0: float             # grasp-point world x
    target_w: np.ndarray    # (m, 3) fitted boundary weights at this step
    target_fmax: float      # peak grasp force at this step

    def __post_init__(self):
        self.w_x0 = np.asarray(self.w_x0, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.target_w = np.asarray(self.target_w, dtype=float)
        if self.q.shape != (6,):
            raise ShapeError(f"pose must be a 6-vector, got {self.q.shape}")
        if self.target_w.ndim != 2 or self.target_w.shape[1] != 3:
            raise ShapeError(f"target weights must be (m, 3), got {self.target_w.shape}")
        if self.target_w.shape[0] != len(self.w_x0):
            raise ShapeError("w_x0 and target_w disagree on m")
        for arr in (self.w_x0, self.q, self.target_w):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError("sample contains non-finite values")
        if not (np.isfinite(self.q_x0) and np.isfinite(self.target_fmax)):
            raise InvalidParameterError("sample contains non-finite values")

    def input_vector(self) -> np.ndarray:
        """(m+7,) network input."""
        return np.concatenate([self.w_x0, self.q, [self.q_x0]])

    def target_vector(self) -> np.ndarray:
        """(3m+1,) network target: row-major weights then the force."""
        return np.concatenate([self.target_w.reshape(-1), [self.target_fmax]])


def write_dataset(samples, layout: KernelLayout, path) -> None:
    """JSON-Lines: a header record with {m, h, schema_version}, then samples."""
    with open(path, "w") as fh:
        fh.write(json.dumps(
            {"m": layout.m, "h": layout.h, "schema_version": _DATASET_SCHEMA},
            separators=(",", ":"),
        ) + "\n")
        for s in samples:
            fh.write(json.dumps(
                {
                    "w_x0": s.w_x0.tolist(),
                    "q": s.q.tolist(),
                    "q_x0": s.q_x0,
                    "target_w": s.target_w.tolist(),
                    "target_fmax": s.target_fmax,
                },
                separators=(",", ":"),
            ) + "\n")


def read_dataset(path):
    """Returns (samples, layout)."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != _DATASET_SCHEMA:
            raise InvalidParameterError(
                f"unsupported dataset schema {header.get('schema_version')!r}"
            )
        layout = KernelLayout(m=int(header["m"]), h=float(header["h"]))
        samples = []
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            samples.append(Sample(
                w_x0=d["w_x0"], q=d["q"], q_x0=float(d["q_x0"]),
                target_w=d["target_w"], target_fmax=float(d["target_fmax"]),
            ))
    return samples, layout


# ---------------------------------------------------------------------------
# Scripted-pull dataset generation.


def sample_pull_direction(rng) -> np.ndarray:
    """Unit direction away from the sheet plane, within 60 degrees of the
    outward edge normal (+y).  Rejection sampling on the sphere."""
    while True:
        d = rng.normal(size=3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            continue
        d = d / n
        if d[2] > 0.0 and d[1] >= 0.5:  # cos 60
            return d


def boundary_grasp_indices(mesh, count: int) -> np.ndarray:
    """`count` node indices evenly spaced along the interior of the carved
    edge (endpoints excluded; they anchor the fit baseline)."""
    order = mesh.boundary_order
    if count < 1:
        raise InvalidParameterError(f"need at least one grasp, got {count}")
    if count > len(order) - 2:
        raise InvalidParameterError(
            f"{count} grasps do not fit on {len(order)} boundary nodes"
        )
    picks = np.round(np.arange(1, count + 1) * (len(order) - 1) / (count + 1))
    return order[picks.astype(int)]


def _fit_boundary(mesh, layout, baseline):
    pts = mesh.node_positions[mesh.boundary_order]
    return fit_boundary_3d(pts, layout, baseline=baseline)


def generate_dataset(
    layout: KernelLayout,
    counts=(20, 5, 100),
    seed: int = 0,
    grid_dims=(32, 32, 2),
    span: float = 0.2,
    material=(1000.0, 1.0),
    params: SimParams | None = None,
    pull_length: float = 0.1,
    profile_harmonics: int = 3,
):
    """Scripted pulls over B boundaries x G grasps, T settled steps each.

    Returns (samples, skipped) where skipped lists (boundary, grasp) pairs
    abandoned after a simulation blowup.  Per-pair seeds derive from the
    top-level seed alone, so results do not depend on iteration order.
    """
    b_count, g_count, t_count = counts
    if min(b_count, g_count, t_count) < 1:
        raise InvalidParameterError(f"counts must be >= 1, got {counts}")
    params = params or SimParams()
    samples = []
    skipped = []
    for b in range(b_count):
        profile = generate_boundary_profile(profile_harmonics, seed=[seed, b])
        base_mesh = build_tissue_mesh(profile, grid_dims=grid_dims, span=span, material=material)
        boundary0 = base_mesh.node_positions[base_mesh.boundary_order]
        baseline = (boundary0[0].copy(), boundary0[-1].copy())
        w0 = _fit_boundary(base_mesh, layout, baseline).weights
        grasp_nodes = boundary_grasp_indices(base_mesh, g_count)
        for g, node in enumerate(grasp_nodes):
            rng = np.random.default_rng([seed, b, g])
            direction = sample_pull_direction(rng)
            mesh = base_mesh.copy()
            grasp_point = mesh.node_positions[node].copy()
            bind_grasp(mesh, grasp_point)
            pose = InstrumentPose(position=grasp_point, orientation=np.zeros(3))
            step = pull_length / (t_count - 1) if t_count > 1 else 0.0
            try:
                for t in range(t_count):
                    if t > 0:
                        nxt = InstrumentPose(
                            position=pose.position + step * direction,
                            orientation=np.zeros(3),
                        )
                        apply_instrument(mesh, pose, nxt)
                        pose = nxt
                        settle(mesh, params)
                    fit = _fit_boundary(mesh, layout, baseline)
                    samples.append(Sample(
                        w_x0=w0[:, 0].copy(),
                        q=pose.as_vector(),
                        q_x0=float(grasp_point[0]),
                        target_w=fit.weights,
                        target_fmax=max_grasp_force(mesh),
                    ))
            except NumericalDivergenceError as exc:
                log.warning(
                    "pull diverged, skipping pair (boundary=%d, grasp=%d): %s",
                    b, g, exc,
                )
                skipped.append((b, g))
    return samples, skipped


# ---------------------------------------------------------------------------
# The network.


@dataclass
class DeformationModel:
    """Fully-connected (m+7)-64-256-512-256-(3m+1) regressor.

    Hidden units are leaky rectifiers (slope 0.01 below zero), the output
    is linear.  Inputs and outputs are z-scored with training-split
    statistics stored on the model.
    """

    layer_sizes: list
    weights: list           # per layer, (out, in)
    biases: list            # per layer, (out,)
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    activation: str = "leaky_relu"

    def __post_init__(self):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[k + 1], self.layer_sizes[k]):
                raise ShapeError(f"layer {k} weight shape {w.shape} breaks the chain")
            if b.shape != (self.layer_sizes[k + 1],):
                raise ShapeError(f"layer {k} bias shape {b.shape} breaks the chain")
        if np.any(self.in_std <= 0) or np.any(self.out_std <= 0):
            raise InvalidParameterError("normalization std must be positive")

    @property
    def m(self) -> int:
        return self.layer_sizes[0] - 7

    @classmethod
    def initialize(cls, m: int, seed: int = 0) -> "DeformationModel":
        """He-initialized network for `m` kernels, unit normalization."""
        sizes = [m + 7, 64, 256, 512, 256, 3 * m + 1]
        rng = np.random.default_rng(seed)
        weights = [
            rng.normal(0.0, np.sqrt(2.0 / sizes[k]), size=(sizes[k + 1], sizes[k]))
            for k in range(len(sizes) - 1)
        ]
        biases = [np.zeros(sizes[k + 1]) for k in range(len(sizes) - 1)]
        return cls(
            layer_sizes=sizes, weights=weights, biases=biases,
            in_mean=np.zeros(sizes[0]), in_std=np.ones(sizes[0]),
            out_mean=np.zeros(sizes[-1]), out_std=np.ones(sizes[-1]),
        )


def _leaky(x):
    return np.where(x >= 0.0, x, _NEGATIVE_SLOPE * x)


def _leaky_grad(x):
    return np.where(x >= 0.0, 1.0, _NEGATIVE_SLOPE)


def _forward_norm(model, z):
    """Normalized input batch -> normalized output batch."""
    a = z
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = a @ w.T + b
        if k != last:
            a = _leaky(a)
    return a


def forward(model: DeformationModel, x) -> np.ndarray:
    """Denormalized prediction; accepts one (m+7,) input or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    if batch.shape[1] != model.layer_sizes[0]:
        raise ShapeError(
            f"expected input length {model.layer_sizes[0]}, got {batch.shape[1]}"
        )
    if not np.all(np.isfinite(batch)):
        raise InvalidParameterError("non-finite network input")
    z = (batch - model.in_mean) / model.in_std
    out = _forward_norm(model, z) * model.out_std + model.out_mean
    return out[0] if single else out


def predict(model: DeformationModel, w_x0, q, q_x0, layout: KernelLayout, baseline):
    """(BoundaryParams3D estimate, predicted max force clamped at zero)."""
    x = np.concatenate([np.asarray(w_x0, float), np.asarray(q, float), [q_x0]])
    out = forward(model, x)
    m = model.m
    params = BoundaryParams3D(
        weights=out[: 3 * m].reshape(m, 3),
        p1=np.asarray(baseline[0], float),
        pn=np.asarray(baseline[1], float),
        layout=layout,
    )
    return params, max(float(out[3 * m]), 0.0)


def input_gradient(model: DeformationModel, x, output_index: int) -> np.ndarray:
    """Exact gradient of one denormalized output w.r.t. the raw input."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.layer_sizes[0],):
        raise ShapeError(f"expected input length {model.layer_sizes[0]}, got {x.shape}")
    if not 0 <= output_index < model.layer_sizes[-1]:
        raise InvalidParameterError(
            f"output index {output_index} outside [0, {model.layer_sizes[-1]})"
        )
    z = (x - model.in_mean) / model.in_std
    pres = []
    a = z
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        pre = w @ a + b
        pres.append(pre)
        a = _leaky(pre) if k != last else pre
    g = np.zeros(model.layer_sizes[-1])
    g[output_index] = model.out_std[output_index]
    for k in range(last, -1, -1):
        if k != last:
            g = g * _leaky_grad(pres[k])
        g = model.weights[k].T @ g
    return g / model.in_std


# ---------------------------------------------------------------------------
# Training.


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6
    max_epochs: int = 400
    split: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidParameterError("batch size must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidParameterError("learning rate must be positive")
        if not 0.0 < self.split < 1.0:
            raise InvalidParameterError("split must lie strictly between 0 and 1")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float


def write_loss_curve(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_mse,val_mse,lr\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_mse:.10e},{r.val_mse:.10e},{r.lr:.10e}\n")


def _safe_std(arr):
    std = arr.std(axis=0)
    return np.where(std < 1e-12, 1.0, std)


def train(dataset, config: TrainConfig):
    """MSE regression with adaptive moments and plateau-halved learning rate.

    Returns (best-validation model, per-epoch history).  Normalization
    statistics come from the training split only.
    """
    if len(dataset) < 10 * config.batch_size:
        raise InvalidParameterError(
            f"need at least {10 * config.batch_size} samples, got {len(dataset)}"
        )
    x = np.stack([s.input_vector() for s in dataset])
    y = np.stack([s.target_vector() for s in dataset])
    m = x.shape[1] - 7

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_train = int(round(len(x) * config.split))
    tr, va = order[:n_train], order[n_train:]

    model = DeformationModel.initialize(m, seed=config.seed)
    model.in_mean = x[tr].mean(axis=0)
    model.in_std = _safe_std(x[tr])
    model.out_mean = y[tr].mean(axis=0)
    model.out_std = _safe_std(y[tr])
    xtr = (x[tr] - model.in_mean) / model.in_std
    ytr = (y[tr] - model.out_mean) / model.out_std
    xva = (x[va] - model.in_mean) / model.in_std
    yva = (y[va] - model.out_mean) / model.out_std

    mom1 = [np.zeros_like(w) for w in model.weights] + [np.zeros_like(b) for b in model.biases]
    mom2 = [np.zeros_like(p) for p in mom1]
    lr = config.learning_rate
    best_val = np.inf
    best = None
    stale = 0
    adam_t = 0
    history = []
    last = len(model.weights) - 1

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(xtr))
        batch_losses = []
        # blowups surface through the loss check below, not as warnings
        with np.errstate(over="ignore", invalid="ignore"):
            for lo in range(0, len(perm) - config.batch_size + 1, config.batch_size):
                idx = perm[lo: lo + config.batch_size]
                zb, tb = xtr[idx], ytr[idx]
                acts = [zb]
                pres = []
                a = zb
                for k, (w, b) in enumerate(zip(model.weights, model.biases)):
                    pre = a @ w.T + b
                    pres.append(pre)
                    a = _leaky(pre) if k != last else pre
                    acts.append(a)
                err = a - tb
                batch_losses.append(float(np.mean(err**2)))
                g = err * (2.0 / err.size)
                grads_w = [None] * len(model.weights)
                grads_b = [None] * len(model.weights)
                for k in range(last, -1, -1):
                    grads_w[k] = g.T @ acts[k]
                    grads_b[k] = g.sum(axis=0)
                    if k > 0:
                        g = (g @ model.weights[k]) * _leaky_grad(pres[k - 1])
                adam_t += 1
                flat_params = model.weights + model.biases
                flat_grads = grads_w + grads_b
                for p, grad, m1, m2 in zip(flat_params, flat_grads, mom1, mom2):
                    m1 *= config.beta1
                    m1 += (1 - config.beta1) * grad
                    m2 *= config.beta2
                    m2 += (1 - config.beta2) * grad**2
                    hat1 = m1 / (1 - config.beta1**adam_t)
                    hat2 = m2 / (1 - config.beta2**adam_t)
                    p -= lr * hat1 / (np.sqrt(hat2) + 1e-8)

            train_mse = float(np.mean(batch_losses)) if batch_losses else float("nan")
            val_mse = float(np.mean((_forward_norm(model, xva) - yva) ** 2))
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch} (train={train_mse}, val={val_mse})"
            )
        history.append(EpochRecord(epoch=epoch, train_mse=train_mse, val_mse=val_mse, lr=lr))
        if val_mse < best_val:
            best_val = val_mse
            best = (copy.deepcopy(model.weights), copy.deepcopy(model.biases))
            stale = 0
        else:
            stale += 1
            if stale > config.patience and lr > config.min_lr:
                lr = max(lr * config.factor, config.min_lr)
                stale = 0

    if best is not None:
        model.weights, model.biases = best
    return model, history


# ---------------------------------------------------------------------------
# Model files.


def save_model(model: DeformationModel, path) -> None:
    doc = {
        "schema_version": _MODEL_SCHEMA,
        "layer_sizes": list(model.layer_sizes),
        "activation": model.activation,
        "negative_slope": _NEGATIVE_SLOPE,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "norm_stats": {
            "in_mean": model.in_mean.tolist(),
            "in_std": model.in_std.tolist(),
            "out_mean": model.out_mean.tolist(),
            "out_std": model.out_std.tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_model(path) -> DeformationModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != _MODEL_SCHEMA:
        raise InvalidParameterError(
            f"unsupported model schema {doc.get('schema_version')!r}"
        )
    ns = doc["norm_stats"]
    return DeformationModel(
        layer_sizes=list(doc["layer_sizes"]),
        weights=[np.asarray(w, dtype=float) for w in doc["weights"]],
        biases=[np.asarray(b, dtype=float) for b in doc["biases"]],
        in_mean=np.asarray(ns["in_mean"], dtype=float),
        in_std=np.asarray(ns["in_std"], dtype=float),
        out_mean=np.asarray(ns["out_mean"], dtype=float),
        out_std=np.asarray(ns["out_std"], dtype=float),
        activation=doc["activation"],
    )


# ---------------------------------------------------------------------------
# Evaluation.


def mean_closest_distance(points, predicted) -> float:
    """Unidirectional mean over `points` of the distance to the nearest
    predicted point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    predicted = np.atleast_2d(np.asarray(predicted, dtype=float))
    diffs = points[:, None, :] - predicted[None, :, :]
    return float(np.linalg.norm(diffs, axis=2).min(axis=1).mean())


def evaluate_mcd(
    model: DeformationModel,
    layout: KernelLayout,
    trials: int = 20,
    distances=(0.02, 0.1),
    seed: int = 1000,
    grid_dims=(32, 32, 2),
    span: float = 0.2,
    material=(1000.0, 1.0),
    params: SimParams | None = None,
    walk_step: float = 0.0025,
    dense: int = 500,
    profile_harmonics: int = 3,
):
    """Boundary reconstruction error at chosen retraction distances.

    Each trial pulls a fresh sheet along a random safe direction, pausing
    at every requested distance to compare ground-truth boundary nodes
    against `dense` samples of the predicted curve.  Returns
    {distance: {"mcd": per-trial array, "mean", "p10", "p90"}}.
    """
    if trials < 1:
        raise InvalidParameterError("trials must be >= 1")
    params = params or SimParams()
    marks = np.sort(np.asarray(distances, dtype=float))
    if marks[0] < 0:
        raise InvalidParameterError("retraction distances must be nonnegative")
    results = {float(d): [] for d in marks}
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        profile = generate_boundary_profile(profile_harmonics, seed=[seed, trial, 0])
        mesh = build_tissue_mesh(profile, grid_dims=grid_dims, span=span, material=material)
        boundary0 = mesh.node_positions[mesh.boundary_order]
        baseline = (boundary0[0].copy(), boundary0[-1].copy())
        w_x0 = _fit_boundary(mesh, layout, baseline).weights[:, 0]
        node = rng.choice(boundary_grasp_indices(mesh, 5))
        grasp_point = mesh.node_positions[node].copy()
        bind_grasp(mesh, grasp_point)
        direction = sample_pull_direction(rng)
        pose = InstrumentPose(position=grasp_point, orientation=np.zeros(3))
        walked = 0.0
        xi_dense = np.linspace(0.0, 1.0, dense)
        for mark in marks:
            while walked < mark - 1e-12:
                inc = min(walk_step, mark - walked)
                nxt = InstrumentPose(
                    position=pose.position + inc * direction,
                    orientation=np.zeros(3),
                )
                apply_instrument(mesh, pose, nxt)
                pose = nxt
                walked += inc
                settle(mesh, params)
            pred, _ = predict(
                model, w_x0, pose.as_vector(), float(grasp_point[0]), layout, baseline
            )
            truth = mesh.node_positions[mesh.boundary_order]
            results[float(mark)].append(
                mean_closest_distance(truth, eval_curve_3d(pred, xi_dense))
            )
    table = {}
    for d, vals in results.items():
        arr = np.asarray(vals)
        table[d] = {
            "mcd": arr,
            "mean": float(arr.mean()),
            "p10": float(np.percentile(arr, 10)),
            "p90": float(np.percentile(arr, 90)),
        }
    return table
