"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class EvDistillError(Exception):
    exit_code = 1


class ConfigError(EvDistillError):
    exit_code = 2


class DataError(EvDistillError):
    exit_code = 3


class ShapeError(DataError, ValueError):
    """Array dimensions disagree with the declared architecture or dataset."""


class NumericError(EvDistillError, ArithmeticError):
    exit_code = 4


class StateError(EvDistillError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""
