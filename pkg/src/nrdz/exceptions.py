"""Exception hierarchy shared by all nrdz modules."""


class NrdzError(ValueError):
    """Base class for every error raised by this package."""


class InvalidLayout(NrdzError):
    pass


class NonIntegralSpacing(NrdzError):
    pass


class DegenerateGeometry(NrdzError):
    pass


class TooClose(NrdzError):
    """Distance below the path-loss reference distance."""


class DuplicateSample(NrdzError):
    pass


class FactorizationFailure(NrdzError):
    """Covariance could not be factorized even after jitter escalation."""


class InsufficientPairs(NrdzError):
    pass


class NoPositiveCorrelation(NrdzError):
    pass


class SingularSystem(NrdzError):
    pass


class GridMismatch(NrdzError):
    pass


class EmptyInput(NrdzError):
    pass


class MissingPrediction(NrdzError):
    pass


class BadGeometry(NrdzError):
    pass


class NoConvergence(NrdzError):
    pass


class NegativeHeight(NrdzError):
    pass


class ConfigError(NrdzError):
    pass
