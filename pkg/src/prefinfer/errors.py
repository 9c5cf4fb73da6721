"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An input violates a documented precondition."""


class PreconditionError(ValueError):
    """A call is made outside the region where it is defined."""


class NumericError(ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class SingularIntegrandError(NumericError):
    pass


class InvertibilityError(InvalidArgumentError):
    pass


class DegenerateFieldError(NumericError):
    pass


class ConvergenceWarning(UserWarning):
    """Soft Q iteration stopped before reaching its tolerance."""
