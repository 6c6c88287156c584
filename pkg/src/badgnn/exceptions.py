"""Exception types raised across the package.

Errors are grouped by what went wrong (shapes, configuration, input data,
temporal ordering, runtime state) so callers can catch selectively.
"""


class BadgnnError(Exception):
    """Base class for all package errors."""


class DimensionError(BadgnnError, ValueError):
    """Matrix/vector shapes are inconsistent or empty where data is required."""


class ConfigError(BadgnnError, ValueError):
    """A configuration value is out of its valid range."""


class ParseError(BadgnnError, ValueError):
    """An input file could not be parsed. Carries the 1-based file line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    """A parsed row disagrees with the schema inferred for the file."""


class TemporalOrderError(BadgnnError, ValueError):
    """An event was applied out of chronological order."""


class StateError(BadgnnError, RuntimeError):
    """An operation was called in an invalid state (e.g. missing cache)."""


class ProbeError(BadgnnError, RuntimeError):
    """A numeric probe hit a non-finite value."""


class UndefinedMetricError(BadgnnError, ValueError):
    """A ranking metric is undefined for the given labels."""
