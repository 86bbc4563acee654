"""Exception hierarchy shared by every module."""


class PdsubError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PdsubError, ValueError):
    """Invalid parameters or a configuration that cannot work."""


class DataError(PdsubError):
    """Malformed input files, a corrupt store or an I/O failure."""


class PlyError(DataError):
    """The PLY file is malformed or uses an unsupported layout."""


class StoreCorruptionError(DataError):
    """Voxel files and manifest disagree."""


class MemoryBudgetError(ConfigError):
    """An in-core method was asked to process more data than allowed."""


class InvariantViolation(PdsubError, AssertionError):
    """An internal invariant did not hold; indicates a bug."""
