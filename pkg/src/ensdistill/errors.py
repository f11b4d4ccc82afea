"""Shared exception types."""


class PackageError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigurationError(PackageError, ValueError):
    """Invalid specs, unknown names, inconsistent run configuration."""


class ShapeError(PackageError, ValueError):
    """Tensor shapes or resolutions do not match the declared contract."""


class NumericalError(PackageError, ArithmeticError):
    """Non-finite values where the math requires finite ones."""


class NumericalOverflowError(NumericalError):
    """A loss evaluated to infinity (e.g. log of an exact zero probability)."""
