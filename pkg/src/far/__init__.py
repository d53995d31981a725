"""Joint face alignment and low-rank frontal reconstruction."""
from .estimator import FrontalAligner
from .solver import FitResult, SolverConfig, fit, frontalize, inner_solve
from .subspace import AppearanceBasis, build_basis, load_basis, save_basis

__all__ = [
    "AppearanceBasis",
    "FitResult",
    "FrontalAligner",
    "SolverConfig",
    "build_basis",
    "fit",
    "frontalize",
    "inner_solve",
    "load_basis",
    "save_basis",
]
__version__ = "0.1.0"
