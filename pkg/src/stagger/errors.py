"""Exception hierarchy. Each family maps to a CLI exit code."""


class StaggerError(Exception):
    exit_code = 1


class DataError(StaggerError):
    """Input data violates a structural requirement."""

    exit_code = 2


class NumericError(StaggerError):
    """A numerical routine could not produce a valid answer."""

    exit_code = 3


class MissingCell(DataError):
    pass


class DuplicateCell(DataError):
    pass


class TiedAdoption(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class AllCensored(DataError):
    pass


class EmptyWindow(DataError):
    pass


class EmptyPrePeriod(DataError):
    pass


class RequiresScalarTimeInvariantCovariate(DataError):
    pass


class IncompatibleOption(DataError):
    pass


class FirstAdoptionAtBoundary(StaggerError):
    exit_code = 4


class NonIdentified(NumericError):
    pass


class Diverged(NumericError):
    pass


class MaxIterExceeded(NumericError):
    pass


class NonFinite(NumericError):
    pass


class DegenerateRegressor(NumericError):
    pass


class NoRoot(NumericError):
    pass


class NumericalUnderflow(NumericError):
    pass


class ZeroPreFit(NumericError):
    pass
