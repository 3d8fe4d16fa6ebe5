"""Exception hierarchy shared by every module."""


class SubforkError(Exception):
    """Base class for all package errors."""


class FormatError(SubforkError):
    pass


class ValidationError(SubforkError, ValueError):
    pass


class ShapeError(SubforkError, ValueError):
    pass


class BoundsError(SubforkError, IndexError):
    pass


class SpecError(SubforkError, ValueError):
    pass


class UndefinedMetricError(SubforkError, ValueError):
    pass


class PlacementError(SubforkError):
    pass


class SingularSystemError(SubforkError):
    pass


class ConvergenceError(SubforkError):
    """Raised when an iterative solve hits ``max_iters``.

    ``history`` holds the relative residual after each recorded sweep.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
