"""Experiment configuration: one JSON document wiring every module.

Sections mirror the library layers: sim (mesh + integrator), rbf, camera,
roi (a list; suite scenarios cycle through it), train, controller, ga, and
suite (seeds, dataset counts, sweep settings, output directory).  Every
seed is explicit; nothing reads ambient randomness.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from retractor.controller import ControllerConfig
from retractor.errors import ConfigError, InvalidParameterError
from retractor.estimator import TrainConfig
from retractor.mesh import SimParams
from retractor.planner import GaConfig
from retractor.rbf import KernelLayout
from retractor.scene import CameraModel, RoiEllipse

_CONFIG_SCHEMA = 1


@dataclass
class ExperimentConfig:
    """Everything a suite run needs, validated at construction."""

    grid_dims: tuple = (40, 40, 3)
    span: float = 0.2
    material: tuple = (1000.0, 1.0)
    profile_harmonics: int = 3
    params: SimParams = field(default_factory=SimParams)
    layout: KernelLayout = field(default_factory=lambda: KernelLayout(m=15))
    camera: CameraModel | None = None   # None -> default oblique view
    rois: list = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    scenario_seeds: list = field(default_factory=lambda: [1])
    dataset_counts: tuple = (20, 5, 100)
    dataset_seed: int = 0
    eval_trials: int = 20
    eval_distances: tuple = (0.02, 0.1)
    eval_seed: int = 1000
    sweep_spacing: float = 5e-3
    sweep_max_iters: int = 700
    stall_window: int = 80
    output_dir: str = "out"

    def __post_init__(self):
        self.grid_dims = tuple(int(v) for v in self.grid_dims)
        self.material = tuple(float(v) for v in self.material)
        self.dataset_counts = tuple(int(v) for v in self.dataset_counts)
        self.eval_distances = tuple(float(v) for v in self.eval_distances)
        self.scenario_seeds = [int(s) for s in self.scenario_seeds]
        if not self.scenario_seeds:
            raise InvalidParameterError("scenario_seeds must not be empty")
        if len(self.grid_dims) != 3:
            raise InvalidParameterError("grid_dims must have three entries")
        if len(self.dataset_counts) != 3:
            raise InvalidParameterError("dataset_counts must be (B, G, T)")
        if min(self.dataset_counts) < 1:
            raise InvalidParameterError("dataset counts must be >= 1")
        if self.span <= 0:
            raise InvalidParameterError("span must be positive")
        if self.sweep_spacing <= 0:
            raise InvalidParameterError("sweep_spacing must be positive")
        if self.sweep_max_iters < 1:
            raise InvalidParameterError("sweep_max_iters must be >= 1")
        if self.stall_window < 0:
            raise InvalidParameterError("stall_window must be >= 0")
        if self.eval_trials < 1:
            raise InvalidParameterError("eval_trials must be >= 1")
        if self.camera is None:
            self.camera = CameraModel.default_oblique(span=self.span)
        if not self.rois:
            # table-level ellipse just beyond the carved edge, the standard
            # occluded placement
            nz = self.grid_dims[2]
            spacing = self.span / (self.grid_dims[0] - 1)
            self.rois = [RoiEllipse(
                center=np.array([
                    self.span / 2.0, self.span + 0.015, -spacing * (nz - 1)
                ]),
                semi_axes=(0.04, 0.02),
                angle=0.0,
            )]

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": _CONFIG_SCHEMA,
            "sim": {
                "grid_dims": list(self.grid_dims),
                "span": self.span,
                "material": list(self.material),
                "profile_harmonics": self.profile_harmonics,
                "params": dataclasses.asdict(self.params),
            },
            "rbf": {"m": self.layout.m},
            "camera": self.camera.to_dict(),
            "roi": [roi.to_dict() for roi in self.rois],
            "train": dataclasses.asdict(self.train),
            "controller": self.controller.to_dict(),
            "ga": self.ga.to_dict(),
            "suite": {
                "scenario_seeds": list(self.scenario_seeds),
                "dataset_counts": list(self.dataset_counts),
                "dataset_seed": self.dataset_seed,
                "eval_trials": self.eval_trials,
                "eval_distances": list(self.eval_distances),
                "eval_seed": self.eval_seed,
                "sweep_spacing": self.sweep_spacing,
                "sweep_max_iters": self.sweep_max_iters,
                "stall_window": self.stall_window,
                "output_dir": self.output_dir,
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if doc.get("schema_version") != _CONFIG_SCHEMA:
            raise ConfigError(
                f"unsupported config schema {doc.get('schema_version')!r}"
            )
        try:
            sim = doc["sim"]
            suite = doc["suite"]
            return cls(
                grid_dims=tuple(sim["grid_dims"]),
                span=float(sim["span"]),
                material=tuple(sim["material"]),
                profile_harmonics=int(sim["profile_harmonics"]),
                params=SimParams(**sim["params"]),
                layout=KernelLayout(m=int(doc["rbf"]["m"])),
                camera=CameraModel.from_dict(doc["camera"]),
                rois=[RoiEllipse.from_dict(r) for r in doc["roi"]],
                train=TrainConfig(**doc["train"]),
                controller=ControllerConfig.from_dict(doc["controller"]),
                ga=GaConfig.from_dict(doc["ga"]),
                scenario_seeds=list(suite["scenario_seeds"]),
                dataset_counts=tuple(suite["dataset_counts"]),
                dataset_seed=int(suite["dataset_seed"]),
                eval_trials=int(suite["eval_trials"]),
                eval_distances=tuple(suite["eval_distances"]),
                eval_seed=int(suite["eval_seed"]),
                sweep_spacing=float(suite["sweep_spacing"]),
                sweep_max_iters=int(suite["sweep_max_iters"]),
                stall_window=int(suite["stall_window"]),
                output_dir=str(suite["output_dir"]),
            )
        except KeyError as exc:
            raise ConfigError(f"config is missing section or key {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(doc)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Presets.


def simulation_preset() -> ExperimentConfig:
    """Full-scale simulated-bench settings: 40x40x3 sheet, 15 kernels,
    the simulation gain row, 10^4-sample dataset."""
    return ExperimentConfig()


def desk_preset() -> ExperimentConfig:
    """Coarse, fast settings for smoke runs on a laptop: small grid,
    small dataset, short GA."""
    return ExperimentConfig(
        grid_dims=(16, 16, 2),
        layout=KernelLayout(m=10),
        train=TrainConfig(batch_size=16, max_epochs=60),
        dataset_counts=(4, 3, 20),
        eval_trials=4,
        ga=GaConfig(population=24, generations=12),
        sweep_max_iters=300,
    )


def hardware_preset() -> ExperimentConfig:
    """Gain row used on the physical platform, kept as a preset for
    completeness; nothing in this repository exercises it."""
    cfg = ExperimentConfig(
        controller=ControllerConfig(
            gain=1e-2,
            adaptation_rate=1e5,
            max_linear_step=2e-3,
        ),
        ga=GaConfig(epsilon=0.75),
    )
    return cfg
