"""Exception types raised across the package."""


class RatioCopulaError(Exception):
    """Base class for all package errors."""


class ValidationError(RatioCopulaError, ValueError):
    """Input has the wrong shape, range or content."""


class NumericalError(RatioCopulaError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class ModelFormatError(RatioCopulaError, OSError):
    """A serialized model file is malformed or has an unsupported version."""


class FitWarning(UserWarning):
    """A fit diagnostic (KL gap, normalizer, loss level) looks suspicious."""
