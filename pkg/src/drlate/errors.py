"""Exception hierarchy shared by every module."""


class DrlateError(Exception):
    """Base class for all package errors."""


class RoleError(DrlateError):
    """A role-assigned column is missing or holds invalid values."""


class DomainError(RoleError):
    """Treatment or instrument column takes values outside {0, 1}."""


class ParseError(DrlateError):
    """A value in the input could not be read as a finite number."""


class TransformError(DrlateError):
    """A covariate transform refers to an unknown column or is malformed."""


class ShapeError(DrlateError, ValueError):
    """Array dimensions do not line up."""


class SingularityError(DrlateError):
    """The (weighted) design or Jacobian is rank deficient."""


class SeparationError(DrlateError):
    """Logit/Poisson coefficients diverge (perfect separation or no variation)."""


class ConvergenceError(DrlateError):
    """Newton iterations did not converge; ``last_iterate`` holds the final coefficients."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class WeakInstrumentError(DrlateError):
    """Denominator of a ratio estimator is numerically zero."""


class DegenerateError(DrlateError):
    """The sample lacks the variation an estimator needs (e.g. an empty arm)."""


class ConsistencyError(DrlateError):
    """A user-declared restriction (one-sided noncompliance) is contradicted by the data."""


class PreconditionError(DrlateError):
    """A test's maintained assumption fails in-sample."""


class BootstrapInstabilityError(DrlateError):
    """Too many bootstrap replicates failed."""


class SpecError(DrlateError):
    """Invalid simulation design."""


class ConfigError(DrlateError):
    """Invalid run configuration."""


class SimulationFailureError(DrlateError):
    """Too many Monte Carlo replications failed."""
