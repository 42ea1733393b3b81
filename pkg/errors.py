# =============================================================================
# ERRORS - errors.py
# =============================================================================
# Exception hierarchy shared by every package.
#
# Usage:
#   from errors import InvalidArgumentError, NumericalFailureError
# =============================================================================


class DenseVOError(Exception):
    """Base class for all errors raised by this toolkit."""


class InvalidArgumentError(DenseVOError, ValueError):
    """An argument is outside the operation's domain."""


class BehindCameraError(DenseVOError):
    """A point that must be projected lies at or behind the image plane."""


class NumericalFailureError(DenseVOError):
    """A residual, loss or solve produced a non-finite value.

    Args:
        message: Human-readable description.
        component: Name of the loss component or solver stage that failed.
        edge: Index of the failing patch-graph edge, when known.
    """

    def __init__(self, message, component=None, edge=None):
        super().__init__(message)
        self.component = component
        self.edge = edge


class InsufficientDataError(DenseVOError):
    """Too few samples survived filtering to run an estimator."""


class DegenerateDistributionError(DenseVOError):
    """A statistic that must be non-zero (spread, range) is zero."""


class ContractViolationError(DenseVOError):
    """A call was made out of order (e.g. backward without a forward cache)."""


class AlignmentFailureError(DenseVOError):
    """Trajectory alignment is impossible (too few or collinear points)."""


class MetricsUndefinedError(DenseVOError):
    """A metric cannot be computed on the given inputs (e.g. empty mesh)."""


class ManifestParseError(DenseVOError):
    """A dataset manifest or config line could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProviderError(DenseVOError):
    """A correspondence or prior provider failed to produce its output."""


class CheckpointFormatError(DenseVOError):
    """A checkpoint blob is truncated, has the wrong magic or version."""


class StageFailure(DenseVOError):
    """A pipeline stage died; carries the stage name and the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause
