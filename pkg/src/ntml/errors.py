"""Exception hierarchy shared by every module."""


class NTMLError(Exception):
    """Base class for all package errors."""


class DimensionError(NTMLError, ValueError):
    """Tensor or batch shapes do not line up."""


class NumericError(NTMLError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class UsageError(NTMLError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(NTMLError, ValueError):
    """A configuration object is invalid."""


class FormatError(NTMLError, ValueError):
    """A file on disk is malformed or does not match what the caller expects."""


class TrainingError(NTMLError, RuntimeError):
    """Optimization diverged (non-finite loss)."""
