"""Exception hierarchy shared across the toolkit."""


class PADError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PADError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(PADError, ValueError):
    """Tensor or array has an unexpected shape."""


class InitializationError(PADError, RuntimeError):
    """Initialization weights could not be resolved or loaded."""


class ManifestError(PADError, ValueError):
    """Malformed or inconsistent manifest file."""


class IngestionError(PADError, OSError):
    """An image file could not be read or decoded."""


class DivergenceError(PADError, RuntimeError):
    """Training produced a non-finite loss."""
