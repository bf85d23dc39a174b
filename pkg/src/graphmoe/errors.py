"""Exception types shared across the package."""


class GraphMoEError(Exception):
    pass


class ShapeError(GraphMoEError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GraphMoEError, ValueError):
    """A documented precondition on an argument does not hold."""


class ConfigError(GraphMoEError, ValueError):
    """An experiment or layer configuration value is out of range or unknown."""


class NumericError(GraphMoEError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class CheckpointFormatError(GraphMoEError, ValueError):
    """A checkpoint could not be read with this version of the format."""
