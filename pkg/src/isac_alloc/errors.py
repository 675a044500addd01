"""Exception types shared across the package."""


class IsacError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(IsacError, ValueError):
    """Waveform numerology or experiment configuration is inconsistent."""


class DegenerateInputError(IsacError, ValueError):
    """A metric is undefined for the given allocation (e.g. empty sensing set)."""


class AmbiguousMainlobeError(IsacError):
    """No half-power crossing was found inside the scan window."""


class NumericalError(IsacError):
    """A linear-algebra routine failed or produced non-finite values."""


class InfeasibleError(IsacError):
    """A convex subproblem (or its rounded repair) has no feasible point.

    ``constraint`` names the maximally violated constraint block and
    ``violation`` its violation at the best point found.
    """

    def __init__(self, message, constraint=None, violation=None, payload=None):
        super().__init__(message)
        self.constraint = constraint
        self.violation = violation
        self.payload = payload


class MonotonicityError(IsacError):
    """An MM outer step increased the objective beyond tolerance."""
