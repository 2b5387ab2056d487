"""Exception types shared across the package."""


class JchainError(Exception):
    """Base class for all library errors."""


class DimensionMismatchError(JchainError):
    """Operator and vector dimensions are incompatible."""


class SingularFactorizationError(JchainError):
    """A shifted matrix factorization broke down on an exactly zero pivot.

    ``location`` is the pivot index (or backend message) where the
    breakdown occurred.
    """

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class NonConvergenceError(JchainError):
    """An iteration exhausted its budget before reaching tolerance.

    ``best`` carries the best iterate produced so far (type depends on the
    caller); ``residuals`` the residual history.
    """

    def __init__(self, message, best=None, residuals=None):
        super().__init__(message)
        self.best = best
        self.residuals = residuals if residuals is not None else []


class RefinementStagnationError(NonConvergenceError):
    """Iterative refinement stopped reducing the correction residual."""


class SemisimpleDegeneracyError(JchainError):
    """The reduced 2x2 pencil looks semisimple, not like a Jordan block.

    Raised when the off-diagonal coupling is too small for the
    nearest-defective construction to be meaningful.
    """


class NewtonBreakdownError(JchainError):
    """|dg/dp| is too small for a meaningful Newton step."""


class AdjointValidationError(JchainError):
    """Adjoint-computed dg/dp disagrees with the finite-difference oracle."""

    def __init__(self, message, dgdp_adjoint=None, dgdp_fd=None):
        super().__init__(message)
        self.dgdp_adjoint = dgdp_adjoint
        self.dgdp_fd = dgdp_fd
