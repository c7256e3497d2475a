"""Offline RL with flow policies kept on bounded noise domains by reflected integration."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    PreconditionError,
)

__all__ = [
    "__version__",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "PreconditionError",
]
