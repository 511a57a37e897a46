"""Exception types shared across the package."""


class FusionError(Exception):
    """Base class for all package errors."""


class ShapeError(FusionError, ValueError):
    """Operand shapes do not conform."""


class ContractError(FusionError, ValueError):
    """A documented precondition was violated."""


class DomainError(FusionError, ValueError):
    """A value lies outside the domain of a function (e.g. log of a non-positive)."""


class NumericError(FusionError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(FusionError, ValueError):
    """Invalid or incomplete run configuration."""
