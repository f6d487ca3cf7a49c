"""Exception hierarchy for bayesfeed."""


class BayesFeedError(Exception):
    """Base class for all package errors."""


class InvalidMesh(BayesFeedError, ValueError):
    pass


class DegenerateElement(BayesFeedError, ValueError):
    pass


class OutOfDomain(BayesFeedError, ValueError):
    pass


class InvalidHyperparameter(BayesFeedError, ValueError):
    pass


class NotPositiveDefinite(BayesFeedError, ArithmeticError):
    pass


class ShapeError(BayesFeedError, ValueError):
    pass


class InvalidShape(BayesFeedError, ValueError):
    pass


class SampleTooLarge(BayesFeedError, ValueError):
    pass


class PreferentialityTooHigh(BayesFeedError, ValueError):
    pass


class SpecMismatch(BayesFeedError, ValueError):
    pass


class EmptySample(BayesFeedError, ValueError):
    pass


class NewtonDiverged(BayesFeedError, ArithmeticError):
    """Inner Newton iteration failed; ``trace`` holds (iteration, objective, grad-norm)."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class HyperOptFailed(BayesFeedError, RuntimeError):
    pass


class AsymmetryViolation(BayesFeedError, ValueError):
    pass


class InsufficientSupport(BayesFeedError, ValueError):
    pass


class DegenerateRatio(BayesFeedError, ArithmeticError):
    pass


class EmptyPool(BayesFeedError, ValueError):
    pass


class IncompleteStudy(BayesFeedError, ValueError):
    pass


class EmptyGrid(BayesFeedError, ValueError):
    pass


class ConfigError(BayesFeedError, ValueError):
    pass
