"""Exception hierarchy shared by all rankflow modules."""


class RankflowError(Exception):
    """Base class for rankflow failures."""


class PreconditionError(RankflowError, ValueError):
    """An operation was called with inputs outside its contract."""


class ParametersOutsideSigma(PreconditionError):
    """(a, b) does not give strictly positive rates for every gap."""


class AssumptionViolated(PreconditionError):
    """A window produced by an approximating strategy has a nonpositive rate."""

    def __init__(self, window, message=None):
        self.window = window
        super().__init__(message or f"window {window} violates the positivity assumption")


class InsufficientSamples(PreconditionError):
    pass


class NumericalError(RankflowError, ArithmeticError):
    """A numerical procedure failed to meet its tolerance."""


class SkorokhodNonconvergence(NumericalError):
    pass


class ExhaustedTailBudget(NumericalError):
    pass


class InternalConsistencyError(RankflowError, AssertionError):
    """A mathematically guaranteed property was observed to fail."""
