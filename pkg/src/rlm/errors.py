"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class CheckpointError(Exception):
    """A checkpoint file is malformed or does not match the requested model."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite value."""
