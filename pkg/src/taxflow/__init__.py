"""Gradient flows of nonlinear income taxes."""
__version__ = "0.1.0"

from . import _kernels
from .errors import (AgentError, ConfigError, ConvergenceError, DomainError, GridError, KernelError,
                     NonUniqueOptimum, SnapshotError, TaxflowError)
from .model import Grid, GridFunction, Preferences, SkillModel

BACKEND = _kernels.BACKEND

__all__ = ["Grid", "GridFunction", "Preferences", "SkillModel", "BACKEND", "__version__",
           "TaxflowError", "GridError", "DomainError", "AgentError", "NonUniqueOptimum",
           "SnapshotError", "ConvergenceError", "KernelError", "ConfigError"]
