"""Exception hierarchy.

Library code raises these; the CLI turns them into `ERROR:` lines and exit 1.
"""


class SAEError(Exception):
    """Root of every error raised by smallarea."""


# --- data model ---
class MissingColumn(SAEError, LookupError):
    pass


class NonBinaryIndicator(SAEError, ValueError):
    pass


class NonFiniteCovariate(SAEError, ValueError):
    pass


class EmptyDataset(SAEError, ValueError):
    pass


class InvalidWeight(SAEError, ValueError):
    pass


class DomainHierarchyError(SAEError, ValueError):
    """A municipality code maps to more than one department."""


class CovariateMismatch(SAEError, ValueError):
    pass


class SpecInconsistent(SAEError, ValueError):
    pass


# --- indicator ---
class InvalidSpec(SAEError, ValueError):
    pass


class MissingIndicatorValue(SAEError, ValueError):
    pass


class EmptyDomain(SAEError, ValueError):
    pass


# --- glmm ---
class RankDeficientDesign(SAEError, ValueError):
    pass


class Separation(SAEError, ArithmeticError):
    pass


class NoConvergence(SAEError, ArithmeticError):
    pass


class InnerNoConvergence(SAEError, ArithmeticError):
    pass


class DimensionMismatch(SAEError, ValueError):
    pass


class UnknownDomain(SAEError, LookupError):
    pass


class InsufficientDomains(SAEError, ValueError):
    pass


# --- estimator / uncertainty ---
class FitMissing(SAEError, LookupError):
    pass


class IncompatibleSpec(SAEError, ValueError):
    pass


class BootstrapFitFailure(SAEError, ArithmeticError):
    pass


class InsufficientSample(SAEError, ValueError):
    pass


class ZeroEstimate(SAEError, ZeroDivisionError):
    pass


# --- oracle ---
class WrongArity(SAEError, ValueError):
    pass


class TooLargeToEnumerate(SAEError, ValueError):
    pass


class QuadratureUnderflow(SAEError, ArithmeticError):
    pass


# --- simulation / cli ---
class InvalidConfig(SAEError, ValueError):
    pass


class SampleTooLarge(SAEError, ValueError):
    pass


class SimulationFailure(SAEError, RuntimeError):
    """Too many design-based replicates failed."""
