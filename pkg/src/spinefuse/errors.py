"""Exception hierarchy shared by all pipeline stages."""


class SpinefuseError(Exception):
    """Base class for package errors."""


class DomainError(SpinefuseError, ValueError):
    """An argument falls outside the domain of a physical model."""


class ParameterError(SpinefuseError, ValueError):
    """Invalid parameters or incompatible array shapes."""


class DataError(SpinefuseError):
    """Malformed or inconsistent on-disk data."""


class ModelFormatError(DataError):
    """A model file cannot be decoded."""


class NumericError(SpinefuseError, ArithmeticError):
    """Non-finite values appeared during optimisation."""
