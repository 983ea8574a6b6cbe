"""Exception hierarchy for cdite.

Each error also subclasses the closest builtin, so callers which catch
``ValueError`` or ``ArithmeticError`` keep working.
"""

from typing import Any

__all__ = [
    "CditeError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "ConformalError",
    "CheckpointError",
    "NumericError",
    "ConvergenceError",
    "ReplicateError",
]


class CditeError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(CditeError, ValueError):
    """An array has the wrong number of dimensions or the wrong length."""


class ConfigError(CditeError, ValueError):
    """A hyperparameter or configuration value is out of range."""


class DataError(CditeError, ValueError):
    """Input data is missing columns, rows or one of the treatment arms."""


class ConformalError(CditeError, ValueError):
    """Weights or quantiles violate the calibration preconditions."""


class CheckpointError(CditeError, ValueError):
    """A checkpoint file is malformed or has an unexpected schema."""


class NumericError(CditeError, ArithmeticError):
    """A computation produced or received non-finite values."""


class ConvergenceError(NumericError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, iterations: int, grad_norm: float, **diagnostics: Any) -> None:
        super().__init__(f"{message} (iterations={iterations}, grad_norm={grad_norm:.3e})")
        self.iterations = iterations
        self.grad_norm = grad_norm
        self.diagnostics = diagnostics


class ReplicateError(CditeError):
    """A benchmark replicate failed; wraps the original error with its context."""

    def __init__(self, message: str, replicate: int, seed: int, method: str | None = None) -> None:
        where = f"replicate {replicate} (seed {seed}" + (f", method {method})" if method else ")")
        super().__init__(f"{where}: {message}")
        self.replicate = replicate
        self.seed = seed
        self.method = method
