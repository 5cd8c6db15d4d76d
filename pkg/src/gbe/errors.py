"""Exception types shared across the package."""


class GBEError(Exception):
    """Base class for all package errors."""


class DimensionError(GBEError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(GBEError, ValueError):
    """A configuration value is invalid.

    ``fields`` lists every violated field when the error comes from config
    validation, so callers can report all problems at once.
    """

    def __init__(self, message, fields=None):
        super().__init__(message)
        self.fields = list(fields or [])


class UsageError(GBEError, RuntimeError):
    """An API was called in a state where it cannot proceed."""


class CorruptFileError(GBEError, IOError):
    """A serialized file failed validation (bad magic, truncation, checksum)."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason
