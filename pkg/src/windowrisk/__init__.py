"""Certified bounds on time-windowed mean and Expected-Shortfall risk of polynomial dynamics."""

import os as _os

# BLAS thread count has to be fixed before numpy loads
_threads = _os.environ.get("WINDOWRISK_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = _threads

from .model import Dynamics, NoiseLaw, NoiseMoments, Risk, RiskProblem, SemialgebraicSet, validate_problem
from .polynomials import Polynomial, parse
from .problemfile import load_problem, loads_problem

__version__ = "0.1.0"

__all__ = ["Dynamics", "NoiseLaw", "NoiseMoments", "Polynomial", "Risk", "RiskProblem", "SemialgebraicSet",
           "load_problem", "loads_problem", "parse", "validate_problem"]
