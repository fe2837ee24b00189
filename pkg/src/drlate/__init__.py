"""Doubly robust estimation of local average treatment effects."""

from .data import CovariateTransform, Dataset, Roles, Term, expand_covariates, load_dataset, save_dataset
from .errors import (
    DrlateError,
    RoleError,
    DomainError,
    ParseError,
    TransformError,
    ShapeError,
    SingularityError,
    SeparationError,
    ConvergenceError,
    WeakInstrumentError,
    DegenerateError,
    ConsistencyError,
    PreconditionError,
    BootstrapInstabilityError,
    SimulationFailureError,
    SpecError,
    ConfigError,
)
from .estimators import (
    EstimateResult,
    EstimatorSpec,
    Models,
    aipw_late,
    dr_att,
    dr_late,
    dr_latt,
    fit_nuisances_late,
    ipw_late,
    ipwra_ate,
    ipwra_late,
    iv_2sls,
    ra_late,
    wald_iv,
)
from .hausman import ComparisonResult, flavor_test, hausman_dr_test
from .inference import (
    BootstrapResult,
    MomentSystem,
    VarianceResult,
    analytic_se,
    bootstrap_se,
    ratio_delta_se,
    sandwich_variance,
    stack_moments,
)
from .propensity import fit_instrument_propensity, fit_treatment_propensity, overlap_report
from .qmle import BERNOULLI, GAUSSIAN, POISSON, FitResult, LefFamily, fit_weighted_qmle, predict_mean
from .simulate import DgpSpec, McReport, generate_sample, run_monte_carlo, true_late

__version__ = "0.1.0"
