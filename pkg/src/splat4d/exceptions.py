"""Exception hierarchy shared by every module of the package."""


class Splat4DError(Exception):
    """Base class for all errors raised by splat4d."""


class InvalidInputError(Splat4DError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateCovarianceError(Splat4DError, ArithmeticError):
    """A covariance (or its temporal block) is too close to singular."""


class BehindCameraError(Splat4DError, ValueError):
    """A point lies on or behind the camera's image plane."""


class ContractViolationError(Splat4DError, RuntimeError):
    """An operation was called in a mode it does not support."""


class FormatError(Splat4DError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ValidationError(Splat4DError, ValueError):
    """A record read from disk violates a type invariant.

    ``index`` is the offending record, when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceError(Splat4DError, FloatingPointError):
    """An optimisation produced a non-finite loss or gradient."""

    def __init__(self, message, iteration=None, block=None):
        super().__init__(message)
        self.iteration = iteration
        self.block = block
