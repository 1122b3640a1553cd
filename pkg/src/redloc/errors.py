"""Exception types raised by the localization pipeline."""

from __future__ import annotations


class LocalizationError(ValueError):
    """Base class for all pipeline errors."""


class InvalidTimingError(LocalizationError):
    pass


class DegenerateBasisError(LocalizationError):
    """Anchor pair too close together to act as a coordinate basis."""


class DegenerateInputError(LocalizationError):
    pass


class DegenerateReferenceError(LocalizationError):
    pass


class LengthMismatchError(LocalizationError):
    pass


class TooFewNodesError(LocalizationError):
    pass


class TooFewLayoutsError(LocalizationError):
    pass


class CoincidentPointsError(LocalizationError):
    pass


class DivergenceError(LocalizationError):
    """Loss became non-finite during unguarded gradient descent."""


class CoverageGapError(LocalizationError):
    pass


class TimestampMismatchError(LocalizationError):
    pass


class ConfigError(LocalizationError):
    pass


class ArenaTooSmallError(ConfigError):
    pass


class PipelineError(LocalizationError):
    """A stage failed while processing one timestamp."""

    def __init__(self, message: str, timestamp: float | None = None):
        super().__init__(message)
        self.timestamp = timestamp
