"""Exception types shared across the package.

Each maps to one failure category so callers (and the CLI exit codes)
can tell misconfiguration apart from numerical blow-ups or corrupt files.
"""


class UnidistillError(Exception):
    """Base class for all package errors."""

    category = "error"


class ConfigurationError(UnidistillError):
    """Invalid, unknown, or inconsistent configuration or arguments."""

    category = "config"


class ShapeError(UnidistillError):
    """Tensor or array shape does not match the declared contract."""

    category = "shape"


class NumericalError(UnidistillError):
    """A computation produced non-finite values or diverged.

    Carries an optional trace of recent loss values for diagnosis.
    """

    category = "numerical"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else None


class IterationError(ConfigurationError):
    """A batch stream cannot produce a single batch (empty or undersized split)."""

    category = "iteration"


class SamplingError(ConfigurationError):
    """An episode request exceeds what the split can supply."""

    category = "sampling"


class IntegrityError(UnidistillError):
    """Stored artifact is malformed, truncated, or fails a checksum."""

    category = "integrity"


class DependencyError(UnidistillError):
    """A required upstream artifact (suite, checkpoint, results) is missing."""

    category = "dependency"
