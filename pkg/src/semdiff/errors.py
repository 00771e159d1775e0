"""Exception types shared across the package."""


class SemdiffError(Exception):
    """Base class for all package errors."""


class ParameterError(SemdiffError, ValueError):
    """A scalar argument is outside its documented range."""


class ShapeError(SemdiffError, ValueError):
    """Array arguments have inconsistent shapes."""


class ConfigError(SemdiffError, ValueError):
    """A model or run configuration is internally inconsistent."""


class DataError(SemdiffError, ValueError):
    """A dataset record or manifest violates its schema."""


class CheckpointError(SemdiffError, ValueError):
    """A checkpoint file is unreadable or incompatible with the run config."""
