"""Exception hierarchy.

Every error carries a short ``kind`` tag so callers (and the CLI) can branch on
the failure without parsing messages.
"""


class FeederkitError(Exception):
    """Base class for all package errors."""

    kind = "error"

    def __init__(self, message, kind=None):
        super().__init__(message)
        if kind is not None:
            self.kind = kind


class FeederFormatError(FeederkitError, ValueError):
    """Input dataset is missing, malformed, or inconsistent."""

    kind = "bad-input"


class TopologyError(FeederkitError):
    """Network graph violates a structural requirement (cycle, no slack, ...)."""

    kind = "not-radial"


class PowerFlowError(FeederkitError):
    kind = "power-flow"


class ObservabilityError(FeederkitError):
    kind = "unobservable"


class EstimationError(FeederkitError):
    kind = "estimation"


class TrainingError(FeederkitError):
    kind = "training"


class SignalError(FeederkitError, ValueError):
    kind = "signal"
