"""Exception types shared across the package."""


class BoxinvError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(BoxinvError):
    """Factorization hit a pivot at or below the rank-deficiency threshold."""


class DimensionMismatch(BoxinvError):
    pass


class IndexOutOfRange(BoxinvError):
    pass


class NoConvergence(BoxinvError):
    """Iterative solve stopped at maxit; carries the final residual."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class SingularReducedSystem(BoxinvError):
    """Reduced KKT block could not be factorized."""


class IterationLimit(BoxinvError):
    """Safety cap exceeded; indicates an implementation bug, not a hard instance."""


class TooLarge(BoxinvError):
    """Problem too large for exhaustive enumeration."""


class IncompatibleMeshes(BoxinvError):
    pass


class UnknownDescriptor(BoxinvError):
    pass


class InvalidTest(BoxinvError):
    pass
