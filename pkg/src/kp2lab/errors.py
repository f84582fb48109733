"""Exception hierarchy.

``DomainError`` subclasses signal bad inputs or violated hypotheses (CLI exit 1);
``NumericalError`` subclasses signal solver trouble (CLI exit 2).
"""


class Kp2Error(Exception):
    pass


class DomainError(Kp2Error):
    pass


class NumericalError(Kp2Error):
    pass


class InvalidParams(DomainError, ValueError):
    pass


class InvalidRange(DomainError, ValueError):
    pass


class HypothesisViolation(DomainError, ValueError):
    pass


class ConfigurationError(DomainError, ValueError):
    pass


class ResolutionError(DomainError, ValueError):
    pass


class IncompleteTrajectory(DomainError, ValueError):
    pass


class FitDomainError(DomainError, ValueError):
    pass


class SolverError(NumericalError, RuntimeError):
    pass


class NonConvergence(NumericalError, RuntimeError):
    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info


class IllConditioned(NonConvergence):
    pass
