"""Shared fixtures: a small trained network and scenario builder used by
the controller and planner suites.  Training runs once per session."""

import numpy as np
import pytest

from retractor.estimator import (
    TrainConfig,
    boundary_grasp_indices,
    generate_dataset,
    train,
)
from retractor.mesh import bind_grasp, build_tissue_mesh, generate_boundary_profile
from retractor.rbf import KernelLayout
from retractor.scene import CameraModel, RetractionScene, RoiEllipse

TINY_M = 10
TINY_GRID = (16, 16, 2)
TINY_SPAN = 0.2


@pytest.fixture(scope="session")
def tiny_model():
    """Network trained on a coarse-grid pull set; accurate enough to seed
    the Jacobian and rank probes, cheap enough for unit tests."""
    layout = KernelLayout(m=TINY_M)
    samples, skipped = generate_dataset(
        layout, counts=(4, 3, 20), seed=7, grid_dims=TINY_GRID, span=TINY_SPAN
    )
    assert not skipped
    model, _ = train(samples, TrainConfig(batch_size=16, max_epochs=60, seed=0))
    return model


@pytest.fixture(scope="session")
def tiny_scenario():
    """Factory for (mesh, scene, grasp_point): fresh mesh viewed by the
    default oblique camera, target strip `dy` beyond the carved edge,
    grasp bound at the middle boundary node."""

    def build(profile_seed: int, dy: float, bind: bool = True):
        profile = generate_boundary_profile(3, seed=[99, profile_seed])
        mesh = build_tissue_mesh(profile, grid_dims=TINY_GRID, span=TINY_SPAN)
        table_z = -mesh.spacing * (TINY_GRID[2] - 1)
        roi = RoiEllipse(
            center=np.array([TINY_SPAN / 2, TINY_SPAN + dy, table_z]),
            semi_axes=(0.04, 0.02),
            angle=0.0,
        )
        camera = CameraModel.default_oblique(span=TINY_SPAN)
        scene = RetractionScene.create(mesh, camera, roi, KernelLayout(m=TINY_M))
        grasp_point = mesh.node_positions[boundary_grasp_indices(mesh, 1)[0]].copy()
        if bind:
            bind_grasp(mesh, grasp_point)
        return mesh, scene, grasp_point

    return build
