"""Uncertainty-aware distillation of weighted ensemble teachers into
single-pass softmax and evidential (Dirichlet) students."""

from evdistill.errors import ConfigError, DataError, EvDistillError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "EvDistillError",
    "NumericError",
    "ShapeError",
    "__version__",
]
