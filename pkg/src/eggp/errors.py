"""Exception types raised across the package."""


class EggpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EggpError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(EggpError, ArithmeticError):
    """A factorization or evaluation failed numerically."""


class TrainingError(EggpError):
    """Hyperparameter optimization diverged.

    ``trace`` holds the losses recorded before the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class RolloutError(EggpError):
    """An autoregressive rollout produced non-finite state."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
