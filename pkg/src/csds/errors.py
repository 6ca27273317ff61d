"""Exception types shared across the package."""


class CSDSError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CSDSError, ValueError):
    """Tensor or map shapes are incompatible with an operation."""


class ConfigError(CSDSError, ValueError):
    """A parameter or configuration value is outside its valid domain."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericError(CSDSError, ArithmeticError):
    """A value that must be finite (or nonnegative) is not."""


class IncompatibleStateError(CSDSError):
    """Two model states cannot be combined (fingerprint or layout mismatch)."""


class GenerationError(CSDSError):
    """Synthetic sample generation could not satisfy its constraints."""


class DivergenceError(CSDSError):
    """Training produced a non-finite loss."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
