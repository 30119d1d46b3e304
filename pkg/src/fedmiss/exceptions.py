"""Error types raised across the package."""


class FedMissError(Exception):
    """Base class for all package errors."""


class SingularMatrix(FedMissError):
    """A pivot fell below the singularity threshold."""


class Separation(FedMissError):
    """Logistic fit diverges: fitted probabilities pinned at 0 or 1."""


class NotConverged(FedMissError):
    """Iterative solver hit its iteration cap.

    The last iterate is kept on ``last_iterate``.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class ParseError(FedMissError):
    """A CSV cell could not be parsed as a number."""


class SchemaError(FedMissError):
    """CSV header or required column content is malformed."""


class DriverUnavailable(FedMissError):
    """A feature map references a field that is absent or missing."""


class AllCompleteOrAllMissing(FedMissError):
    """The completeness indicator has no variation at a site."""


class NonPositiveWeight(FedMissError):
    """A calibrated probability is at or below the positivity floor."""


class NonDiscreteData(FedMissError):
    """Count transport needs every key field to be discrete."""


class DegreesOfFreedom(FedMissError):
    """Too few complete cases to estimate the residual scale."""


class DimensionMismatch(FedMissError):
    """Parameter or block dimensions disagree."""


class ProtocolViolation(FedMissError):
    """A message arrived in a round where its payload is not allowed."""


class CorruptTranscript(FedMissError):
    """A transcript is malformed, truncated or out of order."""
