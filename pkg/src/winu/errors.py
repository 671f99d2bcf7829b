"""Exception hierarchy.

Every error raised by the package derives from :class:`WinuError`. The
experiment CLI maps the three families (config, numerical, data) onto
distinct exit codes.
"""

from __future__ import annotations


class WinuError(Exception):
    """Base class for all package errors."""


class ConfigError(WinuError, ValueError):
    """Invalid or inconsistent configuration."""


class DimensionMismatch(WinuError, ValueError):
    pass


class NumericalError(WinuError, ArithmeticError):
    """Base for failures of a numerical routine."""


class NotPositiveDefinite(NumericalError):
    """A Cholesky pivot was <= 0; the matrix probably lacks lambda damping."""


class NoConvergence(NumericalError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NonFiniteEncountered(NumericalError):
    pass


class SingularCore(NumericalError):
    """The Woodbury core matrix is (numerically) singular."""

    def __init__(self, message: str, pivot: float):
        super().__init__(message)
        self.pivot = pivot


class CoreTooLarge(NumericalError):
    pass


class DimensionTooLarge(NumericalError):
    pass


class NotConverged(NumericalError):
    """Training stopped with a gradient norm above the certificate."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


class ZeroReference(NumericalError):
    pass


class WrongLossKind(WinuError, ValueError):
    pass


class EmptyForgetSet(WinuError, ValueError):
    pass


class EmptyRetainSet(WinuError, ValueError):
    pass


class MissingTargets(WinuError, ValueError):
    pass


class DataError(WinuError, IOError):
    """Base for dataset loading and construction problems."""


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class CountMismatch(DataError):
    pass


class ClassAbsent(DataError):
    pass


class CacheFormatError(DataError):
    pass
