"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line:
2 for bad input, 3 for numerical failure, 4 for infeasibility.
"""


class ProbitError(Exception):
    exit_code = 1


class InputError(ProbitError):
    exit_code = 2


class NumericError(ProbitError):
    exit_code = 3


class InfeasibleError(ProbitError):
    exit_code = 4


# input problems
class AsymmetricInput(InputError):
    pass


class NormalizationViolated(InputError):
    pass


class EmptySubset(InputError):
    pass


class MixedTriples(InputError):
    pass


class InsufficientSamples(InputError):
    pass


class EpsilonOutOfRange(InputError):
    pass


class EnumerationTooLarge(InputError):
    pass


class DuplicateItemsInRow(InputError):
    pass


class ParseError(InputError):
    pass


# numerical failures
class DegenerateCovariance(NumericError):
    pass


class ZeroVariancePair(NumericError):
    pass


class IntegrationFailure(NumericError):
    pass


class ParallelVectors(NumericError):
    pass


class NoAcceptedSamples(NumericError):
    pass


class SingularSystem(NumericError):
    pass


class NegativeScale(NumericError):
    pass


class NonFiniteLikelihood(NumericError):
    pass


class ShrinkFailed(NumericError):
    pass


class RegimeUnsatisfiable(NumericError):
    pass


# infeasibility
class NoFeasibleAngle(InfeasibleError):
    pass


class InfeasibleAtCap(InfeasibleError):
    pass


class NonPositiveRatio(InfeasibleError):
    pass


class SupportMismatch(InfeasibleError):
    pass


class ObservabilityTooLow(UserWarning):
    """Some ordering of a triple was (almost) never observed."""
