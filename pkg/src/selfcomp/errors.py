"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands or parameters have incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """A tensor that must be finite contains NaN or Inf."""


class ConfigError(ValueError):
    """Run configuration failed validation."""


class DataFormatError(ValueError):
    """On-disk data does not match the expected binary layout."""


class CheckpointError(ValueError):
    """Checkpoint directory is missing pieces or internally inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite task loss or gradient."""


class StaleCandidatesError(RuntimeError):
    """Prune candidates no longer match the network they were detected on."""
