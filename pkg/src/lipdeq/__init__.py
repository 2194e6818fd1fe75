"""Lipschitz-constrained multiscale deep equilibrium models on numpy."""

from .budget import LipschitzConfig, overall_bound
from .model import ModelConfig, build_model
from .solvers import SolverConfig, solve

__version__ = "0.1.0"

__all__ = ["LipschitzConfig", "ModelConfig", "SolverConfig", "build_model", "overall_bound", "solve"]
