"""Shared exception types used across the package."""


class StacklabError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(StacklabError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ArgumentError(StacklabError, ValueError):
    """An argument value is outside the operation's domain."""


class ConfigError(StacklabError, ValueError):
    """A configuration object violates its invariants."""


class NumericError(StacklabError, ArithmeticError):
    """A computation produced or received non-finite values."""


class ResourceError(StacklabError, RuntimeError):
    """A request would exceed a configured resource ceiling."""
