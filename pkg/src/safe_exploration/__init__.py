"""Chance-constrained safe exploration for reinforcement learning under Gaussian disturbances."""
from .core import (
    ConstraintSet,
    DomainError,
    GaussianNoise,
    LinearModel,
    PreconditionError,
    SafetyConfig,
    ShapeError,
    UnrecoverableSafetyError,
    normal_cdf,
    normal_cdf_inv,
)
from .explorer import Case, Decision, Explorer

__version__ = "0.1.0"

__all__ = [
    "Case",
    "ConstraintSet",
    "Decision",
    "DomainError",
    "Explorer",
    "GaussianNoise",
    "LinearModel",
    "PreconditionError",
    "SafetyConfig",
    "ShapeError",
    "UnrecoverableSafetyError",
    "normal_cdf",
    "normal_cdf_inv",
]
