"""Exception hierarchy shared by every module."""


class PermDebiasError(ValueError):
    """Base class; the CLI maps these to exit code 1."""


class ValidationError(PermDebiasError):
    pass


class AllZeroMass(PermDebiasError):
    pass


class DimensionMismatch(PermDebiasError):
    pass


class TooManyOptions(PermDebiasError):
    pass


class InsufficientPermutations(PermDebiasError):
    pass


class MissingGold(PermDebiasError):
    pass


class PartialPermutationSet(PermDebiasError):
    pass


class MissingRotation(PermDebiasError):
    pass


class MissingPermutations(PermDebiasError):
    pass


class DegenerateLabels(PermDebiasError):
    pass


class RejectionBudgetExceeded(PermDebiasError):
    pass


class EmptySampleSet(PermDebiasError):
    pass
