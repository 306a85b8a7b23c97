"""Exception types shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2,
TrainingError / NumericError -> 3.
"""


class DriftlabError(Exception):
    """Base class for all package errors."""


class ConfigError(DriftlabError):
    """Invalid configuration: bad dimensions, unknown keys, violated constraints."""


class ShapeError(DriftlabError):
    """Array shape does not match the model architecture."""


class InputError(DriftlabError):
    """Non-finite or otherwise unusable input data."""


class ContractError(DriftlabError):
    """Caller violated an operation precondition (mismatched batches, empty trace)."""


class NumericError(DriftlabError):
    """Non-finite value produced during computation.

    Carries the 1-based step index when raised mid-run.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class TrainingError(NumericError):
    """Source training diverged (non-finite loss)."""
