"""Exception and warning types raised across flab."""


class FlabError(Exception):
    """Base class for all flab errors."""


class EmptyGrid(FlabError, ValueError):
    pass


class NonFiniteFunctionValue(FlabError, ValueError):
    pass


class NonPositiveWeight(FlabError, ValueError):
    pass


class IllConditionedFit(FlabError, ArithmeticError):
    pass


class BackendCannotEvaluateWeight(FlabError, NotImplementedError):
    pass


class BetaBelowGrowthBound(FlabError, ValueError):
    pass


class NonFiniteState(FlabError, ArithmeticError):
    pass


class NotPolynomialCoefficients(FlabError, ValueError):
    pass


class NonFiniteEntries(FlabError, ValueError):
    pass


class BasisMismatch(FlabError, TypeError):
    pass


class NonPositiveWeightOnGrid(FlabError, ValueError):
    pass


class AlphaOutOfRange(FlabError, ValueError):
    pass


class StateOutOfRange(FlabError, IndexError):
    pass


class InvalidStepSize(FlabError, ValueError):
    pass


class QuasiContractionViolated(FlabError):
    """c'(x) - omega exceeded the tolerance somewhere on the sample grid."""

    def __init__(self, worst_x, worst_value):
        self.worst_x = worst_x
        self.worst_value = worst_value
        super().__init__(
            f"killing rate c'(x) - omega = {worst_value:.6g} > 0 at x = {[float(v) for v in worst_x]}"
        )


class ConfigInvalid(FlabError, ValueError):
    pass


# Warnings: findings that degrade a result without invalidating it.

class NonCoerciveProduct(UserWarning):
    pass


class StochasticBackendTolerance(UserWarning):
    pass


class TruncationSuspect(UserWarning):
    pass
