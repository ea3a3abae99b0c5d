"""Tissue-retraction simulation and control toolkit.

A mass-spring sheet with a randomly carved free boundary is observed by a
pinhole camera; a learned estimator maps grasp poses to boundary deformation
and grasp force; an adaptive-Jacobian controller retracts the sheet until an
elliptical region of interest is exposed in the image; a genetic planner
selects the grasp point.  Everything is seeded and deterministic in
sequential mode.

Submodules: mesh (sheet simulation), rbf (boundary parameterization),
scene (camera, frame, overlap domain), estimator (dataset + MLP),
controller (adaptive-Jacobian loop), planner (GA grasp selection),
harness (experiment suites), cli (command line), config (presets and I/O).
"""

__version__ = "0.1.0"
