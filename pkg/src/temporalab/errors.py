"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values or numeric contract violations."""


class TapeError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, repeated backward)."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic produced differing results."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent configuration."""


class InputError(ValueError):
    """Invalid runtime input (outside config validation)."""
