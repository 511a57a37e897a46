"""Robust multi-modal decision fusion through a shared, commuting hidden space."""

from .errors import ConfigError, ContractError, DomainError, FusionError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DomainError", "FusionError", "NumericError", "ShapeError"]
