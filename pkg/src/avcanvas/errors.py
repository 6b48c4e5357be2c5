"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Gradient tape misuse (non-scalar loss, reused tape)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class ConfigError(ValueError):
    """Invalid configuration, pattern or layout request."""


class CompositionError(ConfigError):
    """Two adapters claim the same backbone modules."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""
