"""Bounds on interventional means under unobserved confounding via stochastic causal programming."""

from .auglag import AugLagConfig, solve
from .basis import neural_basis, polynomial_basis
from .pipeline import RunConfig, run_bounds
from .scm import generate, true_effect

__all__ = [
    "AugLagConfig",
    "RunConfig",
    "generate",
    "neural_basis",
    "polynomial_basis",
    "run_bounds",
    "solve",
    "true_effect",
]
__version__ = "0.1.0"
