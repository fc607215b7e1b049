"""Mesh-anchored Gaussian splat models of two hands and an object, a pose optimizer
for bimanual grasps, and a pipeline that renders augmented training data."""

import numba

# prefer OpenMP; the bundled TBB is often too old and numba warns about it
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
