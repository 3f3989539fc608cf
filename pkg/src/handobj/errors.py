"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its precondition."""


class RegistrationError(RuntimeError):
    """Sphere registration diverged or could not be completed.

    Carries the energy trace recorded up to the failure in ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class GradientCheckFailure(RuntimeError):
    """A finite-difference probe produced a non-finite evaluation."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class ParseError(ValueError):
    """A file could not be parsed; ``line`` is the offending 1-based line."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
