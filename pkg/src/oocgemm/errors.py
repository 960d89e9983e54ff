"""Exception hierarchy shared by every layer of the engine."""


class Error(Exception):
    """Base class for all oocgemm errors."""


class DimensionError(Error):
    """Operand shapes are incompatible for multiplication."""


class ConfigError(Error):
    """A configuration is rejected (budget too small, bad block size, ...)."""

    def __init__(self, message, min_capacity=None):
        super().__init__(message)
        self.min_capacity = min_capacity


class FormatError(Error):
    """A file does not conform to its declared format."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StorageError(Error):
    """An I/O operation against backing storage failed."""


class OutOfStorageError(StorageError):
    """Backing storage ran out of space mid-write."""

    def __init__(self, message, bytes_attempted=None):
        if bytes_attempted is not None:
            message = f"{message} (attempted to write {bytes_attempted} bytes)"
        super().__init__(message)
        self.bytes_attempted = bytes_attempted


class RowNotFoundError(Error, LookupError):
    """A row id is outside every range of an object index table."""
