"""Exception taxonomy shared across the package."""


class LatrackError(Exception):
    """Base class for all package errors."""


class ConfigError(LatrackError):
    """Invalid configuration value or inconsistent run setup."""


class ShapeError(LatrackError):
    """Tensor/array shape does not match the declared contract."""


class RangeError(LatrackError):
    """Scalar argument outside its valid range."""


class DataError(LatrackError):
    """Invalid, degenerate or missing data."""


class NumericError(LatrackError):
    """Non-finite value where a finite one is required."""


class ConsistencyError(LatrackError):
    """Two supposedly equivalent computation paths disagree."""
