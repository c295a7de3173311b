"""Shared exception types.

File-format errors live next to their readers (see features.py); the types
here cross module boundaries and map onto CLI exit codes.
"""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class DataError(ValueError):
    """Input data is malformed or inconsistent (missing file, empty caption, ...)."""


class DivergenceError(RuntimeError):
    """Training loss exceeded the divergence threshold or became non-finite."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class UsageError(ValueError):
    """Bad command line or config-file usage."""


class FormatError(DataError):
    """Base for binary container violations."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File carries an unsupported format version."""


class TruncatedPayloadError(FormatError):
    """File ends before the declared payload/footer."""


class ChecksumError(FormatError):
    """Payload bytes do not match the stored checksum."""
