"""Exception hierarchy.

Every error raised on bad input derives from :class:`ValidationError`, which
the CLI maps to exit code 2.
"""


class UpliftLabError(Exception):
    """Base class for all package errors."""


class ValidationError(UpliftLabError, ValueError):
    """Input violates a documented precondition."""


# core
class MissingColumn(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class UnknownTreatmentLabel(ValidationError):
    pass


class DegenerateSplit(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class InvariantViolation(ValidationError):
    pass


# baselearn
class EmptyData(ValidationError):
    pass


class ConfigBoundViolation(ValidationError):
    pass


class SingleClassData(ValidationError):
    pass


class MissingClass(SingleClassData):
    pass


class DegenerateProbability(ValidationError):
    pass


# predictor
class AmountAboveMaximum(ValidationError):
    pass


class EmptyHistory(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class LadderExhausted(ValidationError):
    pass


# simulator
class InvalidMixture(ValidationError):
    pass


class InvalidProportions(ValidationError):
    pass


class InvalidParams(ValidationError):
    pass


# uplift
class MissingArm(ValidationError):
    pass


class InsufficientArmSize(ValidationError):
    pass


class EmptyPolicy(ValidationError):
    pass


# eval
class UncoveredUser(ValidationError):
    pass


class ZeroPropensity(ValidationError):
    pass


class DegenerateCurve(ValidationError):
    pass


class EmptyArm(ValidationError):
    pass


# search
class EmptySpace(ValidationError):
    pass
