"""Shared error types for iterative numerics."""


class ConvergenceError(RuntimeError):
    """An iterative solve exhausted its budget.

    Carries whatever context the failing solver had: the last bracket for
    scalar searches, the last iterate for descent loops.
    """

    def __init__(self, message, bracket=None, last=None):
        super().__init__(message)
        self.bracket = bracket
        self.last = last


class NumericalError(RuntimeError):
    """Non-finite values appeared mid-iteration."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
