"""Exception hierarchy shared across the package."""


class GwbError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(GwbError):
    """Operands have incompatible shapes or ambient dimensions."""

    def __init__(self, message, *, expected=None, got=None):
        if expected is not None or got is not None:
            message = f"{message} (expected {expected}, got {got})"
        super().__init__(message)
        self.expected = expected
        self.got = got


class SingularMatrixError(GwbError):
    """A matrix required to be invertible is numerically singular."""


class DegenerateInstanceError(GwbError):
    """The projection family is identically zero; no reduction exists."""


class CapExceededError(GwbError):
    """The dense multimarginal tensor would exceed the configured cap."""


class NotPositiveDefiniteError(GwbError):
    """A matrix required to be positive (semi)definite is not."""


class PositiveDefinitenessLostError(GwbError):
    """The covariance iteration lost positive definiteness.

    Carries the partial iteration trace in ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class MonotonicityError(GwbError):
    """A quantity guaranteed non-increasing went up beyond slack."""


class ProblemFileError(GwbError):
    """A problem or measure file failed validation.

    ``field`` holds a dotted/indexed path such as ``marginals[2].gaussian.cov``.
    """

    def __init__(self, message, field=None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field
