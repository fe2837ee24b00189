"""Point estimators of LATE, LATT, ATE and ATT.

All IPWRA estimators share one recipe: fit a logit propensity score for the
"arm" variable (the instrument for LATE/LATT, the treatment for ATE/ATT),
fit canonical-link QMLE regressions on each arm with propensity-based
weights, and average the fitted means over the relevant population.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .data import CovariateTransform, Dataset, expand_covariates
from .errors import ConsistencyError, DegenerateError, WeakInstrumentError
from .propensity import PropensityFit, fit_instrument_propensity, fit_treatment_propensity
from .qmle import BERNOULLI, GAUSSIAN, FitResult, LefFamily, fit_weighted_qmle

WEAK_TOL = 1e-10
Z95 = 1.959963984540054

# Weighting schemes, as functions of the propensity p of the arm variable.
SCHEMES = ("none", "inv_p", "inv_1mp", "odds")


def scheme_weights(scheme: str, p: np.ndarray) -> np.ndarray:
    if scheme == "none":
        return np.ones_like(p)
    if scheme == "inv_p":
        return 1.0 / p
    if scheme == "inv_1mp":
        return 1.0 / (1.0 - p)
    if scheme == "odds":
        return p / (1.0 - p)
    raise ValueError(f"unknown weighting scheme {scheme!r}")


@dataclass(frozen=True)
class Models:
    """Covariate transforms for every nuisance model plus the outcome family.

    ``mu0``/``mu1`` model E[Y|X, arm=0/1] and ``rho0``/``rho1`` model
    E[W|X, Z=0/1].
    """

    ps: CovariateTransform
    mu0: CovariateTransform
    mu1: CovariateTransform
    rho0: CovariateTransform
    rho1: CovariateTransform
    outcome_family: LefFamily = GAUSSIAN

    @classmethod
    def shared(cls, covariates: CovariateTransform | str, ps=None, treatment=None,
               outcome_family: LefFamily = GAUSSIAN) -> "Models":
        cov = _as_transform(covariates)
        ps = cov if ps is None else _as_transform(ps)
        tr = cov if treatment is None else _as_transform(treatment)
        return cls(ps, cov, cov, tr, tr, outcome_family)


def _as_transform(t) -> CovariateTransform:
    return t if isinstance(t, CovariateTransform) else CovariateTransform.parse(t)


@dataclass
class Component:
    """One fitted nuisance regression together with what is needed to re-evaluate it."""

    fit: FitResult
    X: np.ndarray        # full-sample design
    rows: np.ndarray     # rows used in the fit (boolean)
    response: str        # "y" or "w"
    scheme: str          # propensity weighting scheme
    family: LefFamily
    bound: np.ndarray | None = None

    def predict(self) -> np.ndarray:
        return self.family.mean(self.X @ self.fit.coefficients, self.bound)


@dataclass
class NuisanceSet:
    ps: PropensityFit
    m0: Component | None = None
    m1: Component | None = None
    r0: Component | None = None
    r1: Component | None = None
    known_pi0_zero: bool = False
    known_pi1_one: bool = False
    arm: str = "instrument"


@dataclass
class IvDesign:
    """Linear IV moment ingredients: ``E[inst * (y - reg @ b)] = 0``."""

    reg: np.ndarray
    inst: np.ndarray
    y: np.ndarray
    coef: np.ndarray
    target: int = 1


@dataclass
class EstimateResult:
    estimand: str
    method: str
    point: float
    se: float | None = None
    ci95: tuple[float, float] | None = None
    components: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    nuisances: Any = field(default=None, repr=False, compare=False)

    def with_se(self, se: float, **diagnostics) -> "EstimateResult":
        ci = (self.point - Z95 * se, self.point + Z95 * se)
        return replace(self, se=float(se), ci95=ci, diagnostics={**self.diagnostics, **diagnostics})

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "method": self.method,
            "point": self.point,
            "se": self.se,
            "ci95": list(self.ci95) if self.ci95 is not None else None,
            "components": dict(self.components),
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return obj


def _ratio(num: float, den: float) -> float:
    if not np.isfinite(den) or abs(den) < WEAK_TOL:
        raise WeakInstrumentError(f"denominator {den!r} is numerically zero")
    return num / den


def _arm_means(v, a):
    on, off = a == 1, a == 0
    if not on.any() or not off.any():
        raise DegenerateError("both arms must be nonempty")
    return v[on].mean(), v[off].mean()


def check_one_sided(d: Dataset, known_pi0_zero: bool, known_pi1_one: bool,
                    arms=(0, 1)) -> None:
    """Validate declared one-sided restrictions and catch undeclared ones.

    A treatment regression cannot be fit on an arm where W is constant, so
    for the instrument arms listed in ``arms`` that case asks for the
    matching restriction instead.
    """
    w0, w1 = d.w[d.z == 0], d.w[d.z == 1]
    if 0 in arms and not known_pi0_zero and not np.any(w0 != 0):
        raise DegenerateError("nobody with Z=0 is treated; declare no-always-takers (known_pi0_zero)")
    if 1 in arms and not known_pi1_one and not np.any(w1 != 1):
        raise DegenerateError("everybody with Z=1 is treated; declare no-never-takers (known_pi1_one)")
    if known_pi0_zero and np.any(d.w[d.z == 0] != 0):
        raise ConsistencyError("no-always-takers declared but some units with Z=0 are treated")
    if known_pi1_one and np.any(d.w[d.z == 1] != 1):
        raise ConsistencyError("no-never-takers declared but some units with Z=1 are untreated")


def _component(d: Dataset, t: CovariateTransform, rows, response: str, scheme: str,
               p: np.ndarray, family: LefFamily) -> Component:
    X = expand_covariates(d, t)
    resp = d.y if response == "y" else d.w
    bound = None
    if family.kind == "binomial_logit":
        bound = d.columns[family.bound_column]
    w = scheme_weights(scheme, p[rows])
    fit = fit_weighted_qmle(X[rows], resp[rows], w, family, None if bound is None else bound[rows])
    return Component(fit, X, rows, response, scheme, family, bound)


# ---------------------------------------------------------------- Wald / 2SLS


def wald_iv(d: Dataset) -> EstimateResult:
    """Ratio of instrument-arm mean differences in outcome and treatment."""
    y1, y0 = _arm_means(d.y, d.z)
    w1, w0 = _arm_means(d.w, d.z)
    num, den = y1 - y0, w1 - w0
    point = _ratio(num, den)
    reg = np.column_stack([np.ones(d.n_obs), d.w])
    inst = np.column_stack([np.ones(d.n_obs), d.z])
    coef = np.array([y0 - point * w0, point])
    return EstimateResult(
        "LATE", "wald_iv", point,
        components={"theta0": y0, "theta1": y1, "pi0": w0, "pi1": w1, "tau_y": num, "tau_w": den},
        nuisances=IvDesign(reg, inst, d.y, coef),
    )


def iv_2sls(d: Dataset, transform: CovariateTransform) -> EstimateResult:
    """Linear IV of Y on (1, W, X) with instruments (1, Z, X); reports the W coefficient."""
    X = expand_covariates(d, transform)
    reg = np.column_stack([X[:, :1], d.w, X[:, 1:]])
    inst = np.column_stack([X[:, :1], d.z, X[:, 1:]])
    coef = np.linalg.solve(inst.T @ reg, inst.T @ d.y)
    return EstimateResult("LATE", "iv", float(coef[1]), nuisances=IvDesign(reg, inst, d.y, coef))


# ---------------------------------------------------------------- IPWRA / RA


def fit_nuisances_late(d: Dataset, models: Models, *, weighted: bool = True,
                       known_pi0_zero: bool = False, known_pi1_one: bool = False) -> NuisanceSet:
    """Propensity score plus arm-specific outcome and treatment regressions.

    With ``weighted`` the Z=0 fits use weights 1/(1-G) and the Z=1 fits 1/G;
    otherwise every fit is unweighted (regression adjustment).
    """
    check_one_sided(d, known_pi0_zero, known_pi1_one)
    ps = fit_instrument_propensity(d, models.ps)
    z = d.z
    on, off = z == 1, z == 0
    s0, s1 = ("inv_1mp", "inv_p") if weighted else ("none", "none")
    G = ps.probabilities
    nu = NuisanceSet(ps, known_pi0_zero=known_pi0_zero, known_pi1_one=known_pi1_one)
    nu.m0 = _component(d, models.mu0, off, "y", s0, G, models.outcome_family)
    nu.m1 = _component(d, models.mu1, on, "y", s1, G, models.outcome_family)
    if not known_pi0_zero:
        nu.r0 = _component(d, models.rho0, off, "w", s0, G, BERNOULLI)
    if not known_pi1_one:
        nu.r1 = _component(d, models.rho1, on, "w", s1, G, BERNOULLI)
    return nu


def _late_from_nuisances(nu: NuisanceSet, method: str) -> EstimateResult:
    theta1 = float(np.mean(nu.m1.predict()))
    theta0 = float(np.mean(nu.m0.predict()))
    pi1 = 1.0 if nu.r1 is None else float(np.mean(nu.r1.predict()))
    pi0 = 0.0 if nu.r0 is None else float(np.mean(nu.r0.predict()))
    tau_y, tau_w = theta1 - theta0, pi1 - pi0
    point = _ratio(tau_y, tau_w)
    return EstimateResult(
        "LATE", method, point,
        components={"theta0": theta0, "theta1": theta1, "pi0": pi0, "pi1": pi1,
                    "tau_y": tau_y, "tau_w": tau_w},
        diagnostics=_fit_diagnostics(nu),
        nuisances=nu,
    )


def _fit_diagnostics(nu: NuisanceSet) -> dict:
    out = {}
    for name in ("m0", "m1", "r0", "r1"):
        c = getattr(nu, name)
        if c is not None:
            out[name] = {"iterations": c.fit.iterations, "max_abs_foc": c.fit.max_abs_foc}
    out["ps"] = {"iterations": nu.ps.fit.iterations, "max_abs_foc": nu.ps.fit.max_abs_foc}
    return out


def dr_late(nu: NuisanceSet, d: Dataset | None = None) -> EstimateResult:
    """IPWRA LATE: full-sample averages of fitted arm differences, outcome over treatment."""
    return _late_from_nuisances(nu, "ipwra")


def ra_late(d: Dataset, models: Models, *, known_pi0_zero=False, known_pi1_one=False) -> EstimateResult:
    nu = fit_nuisances_late(d, models, weighted=False, known_pi0_zero=known_pi0_zero,
                            known_pi1_one=known_pi1_one)
    return _late_from_nuisances(nu, "ra")


def ipwra_late(d: Dataset, models: Models, *, known_pi0_zero=False, known_pi1_one=False) -> EstimateResult:
    """Convenience wrapper: fit the weighted nuisances and return :func:`dr_late`."""
    nu = fit_nuisances_late(d, models, known_pi0_zero=known_pi0_zero, known_pi1_one=known_pi1_one)
    return dr_late(nu, d)


# ---------------------------------------------------------------- IPW / AIPW


def ipw_late(d: Dataset, transform: CovariateTransform, normalized: bool = True,
             *, known_pi0_zero=False, known_pi1_one=False) -> EstimateResult:
    """Ratio of IPW estimates of the effect of Z on Y and on W.

    ``normalized`` rescales the inverse-propensity weights to sum to one in
    each arm; otherwise the raw Horvitz-Thompson averages are used.
    """
    check_one_sided(d, known_pi0_zero, known_pi1_one, arms=())
    ps = fit_instrument_propensity(d, transform)
    G = ps.probabilities
    z = d.z
    a1, a0 = z / G, (1 - z) / (1 - G)

    def mean1(v):
        return float(np.sum(a1 * v) / (np.sum(a1) if normalized else d.n_obs))

    def mean0(v):
        return float(np.sum(a0 * v) / (np.sum(a0) if normalized else d.n_obs))

    theta1, theta0 = mean1(d.y), mean0(d.y)
    pi1 = 1.0 if known_pi1_one else mean1(d.w)
    pi0 = 0.0 if known_pi0_zero else mean0(d.w)
    tau_y, tau_w = theta1 - theta0, pi1 - pi0
    point = _ratio(tau_y, tau_w)
    nu = NuisanceSet(ps, known_pi0_zero=known_pi0_zero, known_pi1_one=known_pi1_one)
    return EstimateResult(
        "LATE", "ipw" if normalized else "ipw_ht", point,
        components={"theta0": theta0, "theta1": theta1, "pi0": pi0, "pi1": pi1,
                    "tau_y": tau_y, "tau_w": tau_w},
        diagnostics={"normalized": normalized},
        nuisances=nu,
    )


def aipw_late(d: Dataset, models: Models, *, known_pi0_zero=False, known_pi1_one=False) -> EstimateResult:
    """Ratio of two AIPW (unnormalized) ATE estimators of Z on Y and on W.

    Each arm mean is ``mean(1[Z=z] (V - m_z) / P(Z=z|X) + m_z)`` with
    unweighted arm regressions ``m_z``.
    """
    nu = fit_nuisances_late(d, models, weighted=False, known_pi0_zero=known_pi0_zero,
                            known_pi1_one=known_pi1_one)
    G = nu.ps.probabilities
    z = d.z

    def aug(comp: Component | None, v, arm: int, fixed: float):
        if comp is None:
            return fixed
        m = comp.predict()
        s = z if arm == 1 else 1 - z
        p = G if arm == 1 else 1 - G
        return float(np.mean(s * (v - m) / p + m))

    theta1 = aug(nu.m1, d.y, 1, 0.0)
    theta0 = aug(nu.m0, d.y, 0, 0.0)
    pi1 = aug(nu.r1, d.w, 1, 1.0)
    pi0 = aug(nu.r0, d.w, 0, 0.0)
    tau_y, tau_w = theta1 - theta0, pi1 - pi0
    point = _ratio(tau_y, tau_w)
    return EstimateResult(
        "LATE", "aipw", point,
        components={"theta0": theta0, "theta1": theta1, "pi0": pi0, "pi1": pi1,
                    "tau_y": tau_y, "tau_w": tau_w},
        diagnostics=_fit_diagnostics(nu),
        nuisances=nu,
    )


# ---------------------------------------------------------------- LATT / ATT / ATE


def dr_latt(d: Dataset, models: Models, *, known_pi0_zero: bool = False) -> EstimateResult:
    """IPWRA LATT.

    Z=0 regressions are weighted by the propensity odds G/(1-G); their
    predictions are averaged over the Z=1 units only.
    """
    check_one_sided(d, known_pi0_zero, False, arms=(0,))
    z = d.z
    on, off = z == 1, z == 0
    if not on.any() or not off.any():
        raise DegenerateError("LATT needs units in both instrument arms")
    ps = fit_instrument_propensity(d, models.ps)
    G = ps.probabilities
    nu = NuisanceSet(ps, known_pi0_zero=known_pi0_zero)
    nu.m0 = _component(d, models.mu0, off, "y", "odds", G, models.outcome_family)
    ybar1 = float(d.y[on].mean())
    wbar1 = float(d.w[on].mean())
    theta0 = float(nu.m0.predict()[on].mean())
    if known_pi0_zero:
        pi0 = 0.0
    else:
        nu.r0 = _component(d, models.rho0, off, "w", "odds", G, BERNOULLI)
        pi0 = float(nu.r0.predict()[on].mean())
    tau_y, tau_w = ybar1 - theta0, wbar1 - pi0
    point = _ratio(tau_y, tau_w)
    return EstimateResult(
        "LATT", "ipwra", point,
        components={"ybar1": ybar1, "wbar1": wbar1, "theta0": theta0, "pi0": pi0,
                    "tau_y": tau_y, "tau_w": tau_w},
        diagnostics=_fit_diagnostics(nu),
        nuisances=nu,
    )


def dr_att(d: Dataset, transform_ps: CovariateTransform, transform_m0: CovariateTransform,
           family: LefFamily = GAUSSIAN) -> EstimateResult:
    """IPWRA ATT as an imputation estimator.

    The control-outcome regression is fit on W=0 rows weighted by F/(1-F) and
    its predictions are averaged over the treated.
    """
    w = d.w
    on, off = w == 1, w == 0
    if not on.any() or not off.any():
        raise DegenerateError("ATT needs both treated and control units")
    ps = fit_treatment_propensity(d, transform_ps)
    F = ps.probabilities
    nu = NuisanceSet(ps, arm="treatment")
    nu.m0 = _component(d, transform_m0, off, "y", "odds", F, family)
    ybar1 = float(d.y[on].mean())
    theta0 = float(nu.m0.predict()[on].mean())
    return EstimateResult(
        "ATT", "ipwra", ybar1 - theta0,
        components={"ybar1": ybar1, "theta0": theta0, "tau_y": ybar1 - theta0},
        diagnostics=_fit_diagnostics(nu),
        nuisances=nu,
    )


def ipwra_ate(d: Dataset, models: Models, target: str = "ATE") -> EstimateResult:
    """IPWRA ATE/ATT of W on Y under unconfoundedness (W takes the instrument's role)."""
    if target == "ATT":
        return dr_att(d, models.ps, models.mu0, models.outcome_family)
    if target != "ATE":
        raise ValueError("target must be 'ATE' or 'ATT'")
    w = d.w
    on, off = w == 1, w == 0
    if not on.any() or not off.any():
        raise DegenerateError("ATE needs both treated and control units")
    ps = fit_treatment_propensity(d, models.ps)
    F = ps.probabilities
    nu = NuisanceSet(ps, arm="treatment")
    nu.m0 = _component(d, models.mu0, off, "y", "inv_1mp", F, models.outcome_family)
    nu.m1 = _component(d, models.mu1, on, "y", "inv_p", F, models.outcome_family)
    theta1 = float(np.mean(nu.m1.predict()))
    theta0 = float(np.mean(nu.m0.predict()))
    return EstimateResult(
        "ATE", "ipwra", theta1 - theta0,
        components={"theta0": theta0, "theta1": theta1, "tau_y": theta1 - theta0},
        diagnostics=_fit_diagnostics(nu),
        nuisances=nu,
    )


# ---------------------------------------------------------------- named pipelines

METHODS = {
    "wald_iv": "wald_iv",
    "iv": "iv",
    "2sls": "iv",
    "ra": "ra",
    "ipw": "ipw",
    "ipw_ht": "ipw_ht",
    "aipw": "aipw",
    "ipwra": "dr_late",
    "dr_late": "dr_late",
    "latt": "dr_latt",
    "dr_latt": "dr_latt",
    "att": "dr_att",
    "dr_att": "dr_att",
    "ate": "ate",
}


@dataclass(frozen=True)
class EstimatorSpec:
    """A picklable ``Dataset -> EstimateResult`` pipeline that refits every nuisance model.

    ``iv`` uses ``models.mu1`` as its control set; the IPW estimators use
    ``models.ps`` only.
    """

    method: str
    models: Models = field(default_factory=lambda: Models.shared(CovariateTransform()))
    known_pi0_zero: bool = False
    known_pi1_one: bool = False

    def __post_init__(self):
        key = self.method.lower()
        if key not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        object.__setattr__(self, "method", METHODS[key])

    def __call__(self, d: Dataset) -> EstimateResult:
        m, flags = self.models, dict(known_pi0_zero=self.known_pi0_zero, known_pi1_one=self.known_pi1_one)
        if self.method == "wald_iv":
            return wald_iv(d)
        if self.method == "iv":
            return iv_2sls(d, m.mu1)
        if self.method == "ra":
            return ra_late(d, m, **flags)
        if self.method in ("ipw", "ipw_ht"):
            return ipw_late(d, m.ps, self.method == "ipw", **flags)
        if self.method == "aipw":
            return aipw_late(d, m, **flags)
        if self.method == "dr_late":
            return ipwra_late(d, m, **flags)
        if self.method == "dr_latt":
            return dr_latt(d, m, known_pi0_zero=self.known_pi0_zero)
        if self.method == "dr_att":
            return dr_att(d, m.ps, m.mu0, m.outcome_family)
        return ipwra_ate(d, m, "ATE")
