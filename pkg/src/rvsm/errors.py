"""Exception hierarchy shared across the package."""


class RvsmError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RvsmError, ValueError):
    """Non-finite coordinates, empty center sets, malformed arguments."""


class DegenerateInitializationError(RvsmError):
    """The initial basis has zero projection onto the targets."""


class ModeSearchError(RvsmError):
    """Newton/IRLS failed to reach the posterior mode.

    The last iterate is kept on ``mu`` so callers can inspect or reuse it.
    """

    def __init__(self, message, mu=None):
        super().__init__(message)
        self.mu = mu


class TwoClassRequiredError(RvsmError, ValueError):
    """Binary training needs at least one positive and one negative target."""


class ClassNotPresentError(RvsmError, ValueError):
    pass


class UndefinedMetricError(RvsmError, ValueError):
    """Metric is undefined for the given truth vector (e.g. a single class)."""


class AlignmentError(RvsmError, ValueError):
    pass


class CloudFormatError(RvsmError, ValueError):
    """Parse failure in a point-cloud file; message names the line/element."""
