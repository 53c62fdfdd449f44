"""Exception hierarchy shared by every module."""


class ChunkAccumError(Exception):
    """Base class for all errors raised by chunkaccum."""


class BoundsError(ChunkAccumError, IndexError):
    """An element, chunk or slot index lies outside its grid."""


class FormatError(ChunkAccumError, ValueError):
    """A stored document or chunk could not be decoded."""


class DataError(ChunkAccumError):
    """Stored data is missing or inconsistent (e.g. absent chunk, no fill value)."""


class ReadOnlyError(ChunkAccumError, PermissionError):
    pass


class SchemaError(ChunkAccumError, ValueError):
    """Accumulation metadata violates the group or dataset schema."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class CapabilityError(ChunkAccumError):
    """A query needs an accumulation dataset the store does not provide."""

    def __init__(self, message, subset=None, kind=None):
        super().__init__(message)
        self.subset = subset
        self.kind = kind


class ConfigError(ChunkAccumError, ValueError):
    """Invalid generation, query or benchmark configuration."""
