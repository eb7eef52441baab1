"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument is outside the documented domain."""


class InsufficientData(ValueError):
    """Fewer observations than the statistic needs."""


class DegenerateScale(ZeroDivisionError):
    """The standard error is zero, so a t statistic is undefined.

    Callers are expected to decide by the sign of ``lbar - mu0`` instead.
    """


class InvalidMove(ValueError):
    """A reversible-jump move is not legal for the current model size."""


class InfeasibleDesign(RuntimeError):
    """No grid point satisfies the error budget."""

    def __init__(self, message, min_error):
        super().__init__(message)
        self.min_error = min_error
