"""Exception types shared across the package."""


class GridBpError(Exception):
    """Base class for all package errors."""


class CaseFormatError(GridBpError):
    """Raised when a case file is malformed or violates grid invariants."""


class ModelError(GridBpError):
    """Raised when a measurement kind is invalid for the requested model."""


class ObservabilityError(GridBpError):
    """Raised when a measurement configuration cannot determine the state.

    ``deficiency`` carries the rank gap of the stacked Jacobian when known.
    """

    def __init__(self, message, deficiency=None):
        super().__init__(message)
        self.deficiency = deficiency


class ConvergenceError(GridBpError):
    """Raised when an iterative solver fails to converge."""


class IllConditionedError(GridBpError):
    """Raised when a matrix-based solver refuses pseudo-scale variances."""


class ConfigError(GridBpError):
    """Raised for invalid run configurations (CLI exit code 3)."""
