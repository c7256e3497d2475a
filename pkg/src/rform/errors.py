"""Exception types shared across the package.

Each maps to one failure vocabulary used throughout: shape mismatches, API misuse,
non-finite numerics, unparseable files, bad run configuration, and violated call
preconditions.
"""


class DimensionError(ValueError):
    """An array argument has the wrong rank or an incompatible shape."""


class ContractError(RuntimeError):
    """An API was called in a way its contract forbids (e.g. backward on a non-scalar)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ValueError):
    """A serialized file does not parse; message includes the byte offset."""


class ConfigError(ValueError):
    """A run configuration is missing, unknown, or inconsistent."""


class PreconditionError(ValueError):
    """An input violates a documented call precondition (e.g. a start point outside the domain)."""
