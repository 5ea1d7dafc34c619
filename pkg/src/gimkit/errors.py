"""Exception types shared across gimkit."""


class GimError(Exception):
    """Base class for all gimkit errors."""


class DomainError(GimError, ValueError):
    """An argument lies outside the domain of an operation."""


class SingularityError(GimError, ArithmeticError):
    """A matrix or point is singular where the computation needs it regular."""


class SolverQualityError(GimError, ArithmeticError):
    """A solver returned a point that violates a guaranteed inequality."""


class ConvergenceError(GimError, RuntimeError):
    """An iterative solver ran out of iterations.

    The best iterate is available as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
