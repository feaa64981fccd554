"""Martingale-loss neural solvers for high-dimensional elliptic boundary value and eigenvalue problems."""

from .problems import ProblemSpec, build_problem
from .sde import Domain, PathEnsemble, SdeCoefficients, sample_ensemble
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Domain",
    "PathEnsemble",
    "ProblemSpec",
    "SdeCoefficients",
    "TrainConfig",
    "build_problem",
    "sample_ensemble",
    "train",
]
