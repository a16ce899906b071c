"""Exception types shared across the package."""


class PnrError(Exception):
    """Base class for all package errors."""


class DimensionError(PnrError, ValueError):
    """Operand shapes are incompatible."""


class SingularMatrixError(PnrError, ArithmeticError):
    """Cholesky factorization met a non-positive pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class ContractError(PnrError, ValueError):
    """A precondition or interface contract was violated."""


class FormatError(PnrError, ValueError):
    """A binary or text file does not follow its expected layout."""


class ConfigError(PnrError, ValueError):
    """Invalid training/evaluation configuration."""
