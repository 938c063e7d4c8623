class SprError(Exception):
    """Base class for errors raised by sprvad."""


class ConfigurationError(SprError, ValueError):
    """Shapes, layer settings or run configuration do not fit together."""


class DivergenceError(SprError, FloatingPointError):
    """Training produced a non-finite loss."""


class IngestionError(SprError, OSError):
    """A frame or dataset file could not be read or is inconsistent."""
