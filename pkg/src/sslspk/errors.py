"""Exception types shared across the pipeline.

Each maps to one machine-readable error kind in the CLI's failure JSON.
"""


class SslSpkError(Exception):
    """Base class; `kind` feeds the CLI error report."""

    kind = "error"


class ConfigurationError(SslSpkError):
    kind = "configuration"


class FormatError(SslSpkError):
    kind = "format"


class LengthError(SslSpkError):
    kind = "length"


class CapacityError(SslSpkError):
    kind = "capacity"


class ShapeError(SslSpkError):
    kind = "shape"


class NumericError(SslSpkError):
    kind = "numeric"


class CoverageError(SslSpkError):
    kind = "coverage"


class CheckpointError(SslSpkError):
    kind = "checkpoint"


class UnknownIdError(SslSpkError):
    kind = "lookup"


class MetricError(SslSpkError):
    kind = "metric"


class DependencyError(SslSpkError):
    kind = "dependency"


class ValidationError(SslSpkError):
    kind = "validation"


class LockError(SslSpkError):
    kind = "lock"
