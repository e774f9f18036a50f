"""Exception hierarchy. Each class maps onto one CLI exit code."""


class RobustMixError(Exception):
    exit_code = 1


class InvalidInputError(RobustMixError, ValueError):
    """Malformed or out-of-contract input."""

    exit_code = 2


class DomainMismatchError(InvalidInputError):
    exit_code = 3


class OutOfOrderStepError(InvalidInputError):
    exit_code = 4


class FitFailureError(RobustMixError, RuntimeError):
    """No usable power-law fit could be produced."""

    exit_code = 5


class InsufficientHistoryError(FitFailureError):
    pass
