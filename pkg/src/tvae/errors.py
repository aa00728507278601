"""Exception hierarchy shared by all modules."""


class TVAEError(Exception):
    """Base class for package errors."""


class ConfigError(TVAEError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(TVAEError):
    """Invalid input data (non-finite values, wrong sizes)."""


class CorruptDatasetError(DataError):
    """On-disk tensor does not match its manifest."""


class VersionError(DataError):
    """Unknown on-disk format version."""


class ShapeError(TVAEError, ValueError):
    """Tensor shape does not match the model contract."""


class StateError(TVAEError, RuntimeError):
    """Recurrent state missing or incompatible with the batch."""


class DivergenceError(TVAEError, FloatingPointError):
    """Training produced a non-finite loss."""
