"""Exception types shared across the library."""


class SparseclError(Exception):
    """Base class for all library errors."""


class ShapeError(SparseclError, ValueError):
    """Tensor dimensions are inconsistent with an operation's contract."""


class InputError(SparseclError, ValueError):
    """A value passed by the caller is outside the accepted domain."""


class ConfigError(SparseclError, ValueError):
    """A configuration object or file failed validation."""


class StateError(SparseclError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class IngestionError(SparseclError, ValueError):
    """A dataset source could not be read or is internally inconsistent."""
