"""Witsenhausen's counterexample solved by deterministic annealing over
randomized piecewise-affine encoders."""

import os as _os

__version__ = "0.1.0"

# WCE_THREADS caps the native thread pools; it only takes effect when this
# package is imported before numpy, as the command-line entry points do.
_threads = _os.environ.get("WCE_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .annealer import AnnealAbort, AnnealConfig, AnnealState, run  # noqa: E402
from .extraction import StepSolution, classify, compare, harden, polish  # noqa: E402
from .piecewise import PiecewiseAffine  # noqa: E402
from .problem import (  # noqa: E402
    CostReport, EncoderMap, Problem, baseline_affine_optimal, baseline_one_step, piecewise_cost,
    total_cost,
)

__all__ = [
    "AnnealAbort", "AnnealConfig", "AnnealState", "CostReport", "EncoderMap", "PiecewiseAffine",
    "Problem", "StepSolution", "baseline_affine_optimal", "baseline_one_step", "classify",
    "compare", "harden", "piecewise_cost", "polish", "run", "total_cost",
]
