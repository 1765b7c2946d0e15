"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code (see :mod:`hetloc.cli`).
"""


class HetlocError(Exception):
    """Base class for every error raised on purpose by this package."""


class UsageError(HetlocError, ValueError):
    """A function was called with incompatible arguments (shapes, modalities)."""


class ConfigError(HetlocError, ValueError):
    """Invalid configuration or generation parameters."""


class GenerationError(HetlocError, RuntimeError):
    """A generator gave up after its bounded number of retries."""


class DataError(HetlocError):
    """Dataset contents are unusable for the requested operation."""


class DatasetIOError(HetlocError, OSError):
    """Base for on-disk format problems."""


class MissingFileError(DatasetIOError):
    pass


class ChecksumError(DatasetIOError):
    pass


class VersionError(DatasetIOError):
    pass


class NumericError(HetlocError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class QueryError(HetlocError):
    """A retrieval query had no admissible candidates."""


class EstimationError(HetlocError):
    """An estimator received degenerate input."""


class TrackingLostError(HetlocError):
    """The tracked pose left the map. Carries the last valid state."""

    def __init__(self, message, last_state=None, partial=None):
        super().__init__(message)
        self.last_state = last_state
        self.partial = partial
