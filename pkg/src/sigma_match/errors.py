"""Exception types raised across the package."""


class SigmaError(Exception):
    """Base class for all package errors."""


class ShapeError(SigmaError, ValueError):
    """Array dimensions do not agree with what an operation expects."""


class NumericError(SigmaError, FloatingPointError):
    """Non-finite values were found where finite ones are required."""


class PreconditionError(SigmaError, ValueError):
    """An operation was called outside its documented domain."""


class ConfigError(SigmaError, ValueError):
    """A run or scenario configuration is invalid."""


class NonFiniteLossError(NumericError):
    """A training step produced a NaN or infinite loss.

    ``diagnostics`` maps each loss component to its (possibly non-finite) value.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
