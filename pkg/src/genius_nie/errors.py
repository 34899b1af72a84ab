"""Exception hierarchy shared by all estimators."""


class MediationError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MediationError, ValueError):
    """Input violates a documented precondition."""


class DimensionMismatch(ValidationError):
    pass


class InvalidParameter(ValidationError):
    pass


class RankDeficient(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class Separation(MediationError):
    pass


class MissingLatentColumns(ValidationError):
    pass


class MissingColumn(ValidationError):
    pass


class AllRowsDropped(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class EmptyCell(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class SingularMomentSystem(ValidationError):
    pass


class WeakIdentification(MediationError):
    """The heteroskedasticity-based moment has (numerically) zero denominator."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class TooManyFailures(MediationError):
    pass
