"""Exception types shared across modules.

The CLI maps :class:`PreconditionError` to exit code 2 and
:class:`ConditioningError` to exit code 3.
"""


class LqgError(Exception):
    pass


class PreconditionError(LqgError, ValueError):
    pass


class ParameterDomainError(PreconditionError):
    pass


class ResolutionError(PreconditionError):
    pass


class UnsupportedCombinationError(PreconditionError):
    pass


class OutOfRangeError(PreconditionError):
    pass


class CalibrationError(PreconditionError):
    pass


class PlaceholderError(PreconditionError):
    pass


class ConditioningError(LqgError, ArithmeticError):
    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class RetryExhaustedError(LqgError, RuntimeError):
    def __init__(self, message, attempts):
        super().__init__(message)
        self.attempts = attempts
