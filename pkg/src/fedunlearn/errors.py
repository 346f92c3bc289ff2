"""Exception types shared across the package."""


class FedUnlearnError(Exception):
    """Base class for all package errors."""


class DimensionError(FedUnlearnError, ValueError):
    pass


class DomainError(FedUnlearnError, ValueError):
    pass


class NumericsError(FedUnlearnError, ArithmeticError):
    pass


class StateError(FedUnlearnError, RuntimeError):
    pass


class FormatError(FedUnlearnError, ValueError):
    pass


class IoError(FedUnlearnError, OSError):
    pass


class EmptyAfterFilterError(FedUnlearnError, ValueError):
    pass


class SplitError(FedUnlearnError, ValueError):
    def __init__(self, user, message=None):
        self.user = user
        super().__init__(message or f"user {user} has fewer than 2 interactions")


class SamplingError(FedUnlearnError, ValueError):
    pass


class DegenerateGradientError(FedUnlearnError, ArithmeticError):
    pass


class DegenerateInputError(FedUnlearnError, ArithmeticError):
    pass
