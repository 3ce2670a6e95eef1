"""Inverse rendering with learned point-wise material transforms.

The package optimizes a voxel radiance field jointly over two material
conditions of the same scene, learns the per-point BRDF mapping between
them, and re-applies that mapping to independently captured target
scenes.  A Monte-Carlo shading oracle and synthetic dataset generator
provide ground truth for every differentiable path.

Setting ``MATXFER_THREADS`` caps BLAS parallelism; ``=1`` activates the
bit-determinism contract (identical checkpoints and dataset bytes for a
fixed seed).  The cap must land before numpy loads its BLAS, which is
why it lives here rather than in the CLI.
"""

import os as _os

_threads = _os.environ.get("MATXFER_THREADS")
if _threads is not None:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
