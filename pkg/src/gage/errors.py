"""Exception types shared across the package."""


class GageError(Exception):
    """Base class for all package errors."""


class DimensionError(GageError, ValueError):
    """An array had the wrong rank or extent along some axis."""


class ConfigurationError(GageError, ValueError):
    """A configuration value is outside its allowed domain."""


class NoActivationError(GageError):
    """A binary attention mask has no active pixel."""


class FormatError(GageError, ValueError):
    """A file did not match its binary or text format."""


class CheckpointError(GageError):
    """A checkpoint is missing, malformed, or incompatible."""


class TrainingError(GageError):
    """Training hit a non-recoverable numerical state."""


class MissingViewError(GageError, KeyError):
    """A multi-view combination was given fewer than all three views."""
