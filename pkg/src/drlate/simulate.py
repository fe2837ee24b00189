"""Monte Carlo design calibrated to a 401(k)-style savings study, and the study harness.

Potential outcomes are indexed by the instrument: ``Y = Z Y(1) + (1-Z) Y(0)``
and ``W = Z D(1)``, so noncompliance is one-sided. Regressors are
``(1, income, age-25, (age-25)^2)`` with ``income = exp(log-income)`` and
``(age, log-income)`` bivariate normal.
"""

from __future__ import annotations

import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import CovariateTransform, Dataset, Roles
from .errors import DrlateError, SimulationFailureError, SpecError
from .estimators import EstimatorSpec, Models
from .inference import WORKERS_ENV, sandwich_variance, stack_moments
from .qmle import BERNOULLI, GAUSSIAN

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

Z95 = 1.959963984540054
MAX_FAIL_RATE = 0.01
AGE_SHIFT = 25.0

# Coefficients on (1, income, age-25, (age-25)^2).
GAMMA = (-1.727, 0.0000232, 0.0581, -0.00158)
DELTA1 = (0.387, 0.0000154, -0.0285, 0.000699)
CONT_Z1 = (-36377.2, 1.134, -106.6, 41.36)
CONT_Z0 = (-19452.5, 0.762, -557.4, 38.28)
BIN_Z1 = (-3.148, 0.0000318, 0.0420, 0.000211)
BIN_Z0 = (-3.653, 0.0000342, 0.0665, -0.000267)

# Surrogate covariate law for (age, log income); see the README for how it was calibrated.
AGE_MEAN, AGE_SD = 41.08, 10.30
LOG_INCOME_MEAN, LOG_INCOME_SD = 10.462, 0.477
AGE_LOG_INCOME_CORR = 0.26
# Outcome error standard deviations for the continuous design.
SIGMA1, SIGMA0 = 67800.0, 50850.0


def _cov(sd_a, sd_l, rho):
    c = rho * sd_a * sd_l
    return ((sd_a ** 2, c), (c, sd_l ** 2))


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``covariate_mean``/``covariate_cov`` describe ``(age, log income)``.
    ``outcome_path`` selects which variable indexes the potential outcomes:
    ``"z"`` (the calibrated design) or ``"w"`` (exclusion holds, so the
    target equals the complier average effect).
    """

    n: int = 1000
    covariate_mean: tuple[float, float] = (AGE_MEAN, LOG_INCOME_MEAN)
    covariate_cov: tuple = _cov(AGE_SD, LOG_INCOME_SD, AGE_LOG_INCOME_CORR)
    gamma: tuple = GAMMA
    delta1: tuple = DELTA1
    outcome_kind: str = "continuous"
    alpha_beta_z0: tuple = CONT_Z0
    alpha_beta_z1: tuple = CONT_Z1
    sigma0: float = SIGMA0
    sigma1: float = SIGMA1
    outcome_path: str = "z"
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma", "delta1", "alpha_beta_z0", "alpha_beta_z1"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 4:
                raise SpecError(f"{name} needs 4 coefficients (intercept, income, age-25, (age-25)^2)")
            object.__setattr__(self, name, v)
        cov = np.asarray(self.covariate_cov, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise SpecError("covariate_cov must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(cov)[0] < 0:
            raise SpecError("covariate_cov is not positive semidefinite")
        object.__setattr__(self, "covariate_cov", tuple(map(tuple, cov.tolist())))
        object.__setattr__(self, "covariate_mean", tuple(float(x) for x in self.covariate_mean))
        if self.outcome_kind not in ("continuous", "binary"):
            raise SpecError("outcome_kind must be 'continuous' or 'binary'")
        if self.outcome_path not in ("z", "w"):
            raise SpecError("outcome_path must be 'z' or 'w'")
        if self.n < 10:
            raise SpecError("n must be at least 10")
        if self.sigma0 < 0 or self.sigma1 < 0:
            raise SpecError("error standard deviations must be nonnegative")

    @classmethod
    def continuous(cls, n: int = 1000, seed: int = 0, **kw) -> "DgpSpec":
        return cls(n=n, seed=seed, **kw)

    @classmethod
    def binary(cls, n: int = 1000, seed: int = 0, **kw) -> "DgpSpec":
        kw.setdefault("alpha_beta_z0", BIN_Z0)
        kw.setdefault("alpha_beta_z1", BIN_Z1)
        return cls(n=n, seed=seed, outcome_kind="binary", **kw)

    @classmethod
    def from_mapping(cls, m: dict) -> "DgpSpec":
        """Build from a preset name plus overrides, e.g. ``{"preset": "binary", "n": 4000}``."""
        m = dict(m)
        preset = m.pop("preset", m.get("outcome_kind", "continuous"))
        unknown = set(m) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown DGP fields: {sorted(unknown)}")
        if preset == "continuous":
            return cls.continuous(**m)
        if preset == "binary":
            m.pop("outcome_kind", None)
            return cls.binary(**m)
        raise SpecError(f"unknown preset {preset!r}")

    @classmethod
    def from_toml(cls, path) -> "DgpSpec":
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
        return cls.from_mapping(cfg.get("dgp", cfg))

    def to_dict(self) -> dict:
        return asdict(self)


def _regressors(age, income):
    a = age - AGE_SHIFT
    return np.column_stack([np.ones_like(a), income, a, a * a])


def _draw_covariates(spec: DgpSpec, rng: np.random.Generator, n: int):
    L = np.linalg.cholesky(np.asarray(spec.covariate_cov) + 1e-300 * np.eye(2))
    E = rng.standard_normal((n, 2)) @ L.T + np.asarray(spec.covariate_mean)
    age, income = E[:, 0], np.exp(E[:, 1])
    return age, income


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``(seed, replication)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replication)])))


SIM_ROLES = Roles("y", "w", "z", ("income", "age", "age_sq"))


def generate_sample(spec: DgpSpec, replication: int = 0) -> Dataset:
    """One draw of ``spec.n`` units with columns income, age, age_sq, z, w, y."""
    rng = replication_rng(spec.seed, replication)
    n = spec.n
    age, income = _draw_covariates(spec, rng, n)
    X = _regressors(age, income)
    z = (expit(X @ np.asarray(spec.gamma)) > rng.uniform(size=n)).astype(float)
    d1 = (expit(X @ np.asarray(spec.delta1)) > rng.uniform(size=n)).astype(float)
    w = z * d1
    if spec.outcome_kind == "continuous":
        y1 = X @ np.asarray(spec.alpha_beta_z1) + spec.sigma1 * rng.standard_normal(n)
        y0 = X @ np.asarray(spec.alpha_beta_z0) + spec.sigma0 * rng.standard_normal(n)
    else:
        y1 = (expit(X @ np.asarray(spec.alpha_beta_z1)) > rng.uniform(size=n)).astype(float)
        y0 = (expit(X @ np.asarray(spec.alpha_beta_z0)) > rng.uniform(size=n)).astype(float)
    path = z if spec.outcome_path == "z" else w
    y = path * y1 + (1.0 - path) * y0
    cols = {"income": income, "age": age, "age_sq": age * age, "z": z, "w": w, "y": y}
    return Dataset(cols, SIM_ROLES)


@dataclass(frozen=True)
class TrueLate:
    value: float
    mc_error: float
    draws: int

    def __float__(self):
        return self.value


def true_late(spec: DgpSpec, draws: int = 10_000_000, seed: int = 20240101,
              chunk: int = 1_000_000) -> TrueLate:
    """Population target of the LATE estimators, by large-sample plug-in.

    The target is the ratio of the average reduced-form effect of Z on Y to
    the average first stage, ``E[mu_1(X) - mu_0(X)] / E[rho_1(X)]``, with the
    conditional means evaluated exactly and only X simulated. When
    ``outcome_path == "w"`` the numerator is ``E[rho_1(X)(mu_1(X) - mu_0(X))]``
    and the ratio is the complier average effect.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xD17E])))
    num_s = den_s = nn = nd = cross = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        age, income = _draw_covariates(spec, rng, m)
        X = _regressors(age, income)
        p = expit(X @ np.asarray(spec.delta1))
        if spec.outcome_kind == "continuous":
            diff = X @ (np.asarray(spec.alpha_beta_z1) - np.asarray(spec.alpha_beta_z0))
        else:
            diff = expit(X @ np.asarray(spec.alpha_beta_z1)) - expit(X @ np.asarray(spec.alpha_beta_z0))
        num = diff if spec.outcome_path == "z" else p * diff
        num_s += num.sum()
        den_s += p.sum()
        nn += (num * num).sum()
        nd += (p * p).sum()
        cross += (num * p).sum()
        done += m
    a, b = num_s / draws, den_s / draws
    tau = a / b
    # delta-method MC error of a ratio of means
    va = nn / draws - a * a
    vb = nd / draws - b * b
    cab = cross / draws - a * b
    var = (va - 2 * tau * cab + tau * tau * vb) / (b * b) / draws
    return TrueLate(float(tau), float(np.sqrt(max(var, 0.0))), draws)


# ---------------------------------------------------------------- study harness

SCENARIOS = ("all_correct", "outcome_misspec", "ps_misspec")
ESTIMATORS = ("iv", "ra", "ipw", "ipwra", "aipw")
FULL_COVARIATES = "income,age,age_sq"
MISSPEC_DROP = "age_sq"
# which nuisance models each estimator depends on
_USES = {"iv": ("out",), "ra": ("out",), "ipw": ("ps",), "ipwra": ("ps", "out"), "aipw": ("ps", "out")}


def scenario_models(scenario: str, family=GAUSSIAN, covariates: str = FULL_COVARIATES,
                    drop: str = MISSPEC_DROP) -> Models:
    full = CovariateTransform.parse(covariates)
    short = full.without(drop)
    if scenario == "all_correct":
        ps, out = full, full
    elif scenario == "outcome_misspec":
        ps, out = full, short
    elif scenario == "ps_misspec":
        ps, out = short, full
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return Models(ps, out, out, out, out, family)


def _method(name: str) -> str:
    return {"ipwra": "dr_late"}.get(name, name)


def _one_replication(args):
    spec, estimators, scenarios, rep, known_pi0_zero = args
    d = generate_sample(spec, rep)
    fam = GAUSSIAN if spec.outcome_kind == "continuous" else BERNOULLI
    out = np.full((len(scenarios), len(estimators), 2), np.nan)
    memo = {}
    for s, scen in enumerate(scenarios):
        models = scenario_models(scen, fam)
        for e, name in enumerate(estimators):
            # estimators that do not touch the misspecified model share results across scenarios
            key = (name,) + tuple(str(models.ps if u == "ps" else models.mu1) for u in _USES.get(name, ("ps", "out")))
            if key not in memo:
                try:
                    res = EstimatorSpec(_method(name), models, known_pi0_zero=known_pi0_zero)(d)
                    se = sandwich_variance(stack_moments(d, res.nuisances, res)).se
                    memo[key] = (res.point, se)
                except (DrlateError, np.linalg.LinAlgError):
                    memo[key] = (np.nan, np.nan)
            out[s, e] = memo[key]
    return out


@dataclass
class McCell:
    estimator: str
    scenario: str
    bias: float
    rmse: float
    coverage: float
    n_failures: int
    mc_se_bias: float
    n_ok: int


@dataclass
class McReport:
    cells: list[McCell]
    replications: int
    true_late: float
    true_late_mc_error: float
    spec: DgpSpec
    raw: np.ndarray = field(default=None, repr=False)

    def cell(self, estimator: str, scenario: str = "all_correct") -> McCell:
        for c in self.cells:
            if c.estimator == estimator and c.scenario == scenario:
                return c
        raise KeyError((estimator, scenario))

    @property
    def failure_rate(self) -> float:
        return max((c.n_failures / self.replications for c in self.cells), default=0.0)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["estimator", "scenario", "bias", "rmse", "coverage", "n_failures",
                     "mc_se_bias", "replications", "true_late"])
        for c in self.cells:
            wr.writerow([c.estimator, c.scenario, repr(c.bias), repr(c.rmse), repr(c.coverage),
                         c.n_failures, repr(c.mc_se_bias), self.replications, repr(self.true_late)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_text(self) -> str:
        lines = [f"true LATE {self.true_late:.4g} (MC error {self.true_late_mc_error:.2g}), "
                 f"N={self.spec.n}, R={self.replications}, outcome={self.spec.outcome_kind}"]
        for scen in dict.fromkeys(c.scenario for c in self.cells):
            lines.append("")
            lines.append(scen)
            lines.append(f"{'estimator':<10}{'bias':>12}{'RMSE':>12}{'cov.':>8}{'fail':>6}")
            for c in self.cells:
                if c.scenario == scen:
                    lines.append(f"{c.estimator:<10}{c.bias:>12.4g}{c.rmse:>12.4g}"
                                 f"{c.coverage:>8.4g}{c.n_failures:>6d}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"replications": self.replications, "true_late": self.true_late,
                "true_late_mc_error": self.true_late_mc_error, "spec": self.spec.to_dict(),
                "cells": [asdict(c) for c in self.cells]}


def summarize(raw: np.ndarray, truth: float, estimators, scenarios) -> list[McCell]:
    """Reduce a ``(R, scenario, estimator, [est, se])`` array into report cells."""
    cells = []
    R = raw.shape[0]
    for s, scen in enumerate(scenarios):
        for e, name in enumerate(estimators):
            est, se = raw[:, s, e, 0], raw[:, s, e, 1]
            ok = np.isfinite(est) & np.isfinite(se)
            k = int(ok.sum())
            if k == 0:
                cells.append(McCell(name, scen, np.nan, np.nan, np.nan, R, np.nan, 0))
                continue
            err = np.sort(est[ok] - truth)
            bias = float(np.mean(err))
            rmse = float(np.sqrt(np.mean(err * err)))
            cov = float(100.0 * np.mean(np.abs(est[ok] - truth) <= Z95 * se[ok]))
            mcse = float(np.std(err, ddof=1) / np.sqrt(k)) if k > 1 else np.nan
            cells.append(McCell(name, scen, bias, rmse, cov, R - k, mcse, k))
    return cells


def run_monte_carlo(spec: DgpSpec, estimators=ESTIMATORS, scenarios=SCENARIOS, R: int = 1000,
                    seed: int | None = None, *, known_pi0_zero: bool = True,
                    truth: TrueLate | None = None, workers: int | None = None,
                    strict: bool = True) -> McReport:
    """Simulate ``R`` samples and evaluate every estimator under every scenario.

    All scenarios and estimators in a replication see the same sample, drawn
    from the stream keyed by ``(seed, replication)``. Each estimate carries
    its analytic sandwich SE for the coverage computation.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    estimators, scenarios = tuple(estimators), tuple(scenarios)
    for s in scenarios:
        if s not in SCENARIOS:
            raise ValueError(f"unknown scenario {s!r}")
    if seed is not None:
        spec = replace(spec, seed=seed)
    truth = true_late(spec) if truth is None else truth
    tasks = [(spec, estimators, scenarios, r, known_pi0_zero) for r in range(R)]
    nw = max(1, int(workers if workers is not None else os.environ.get(WORKERS_ENV, "1")))
    if nw == 1:
        rows = [_one_replication(t) for t in tasks]
    else:
        with ProcessPoolExecutor(nw) as ex:
            rows = list(ex.map(_one_replication, tasks, chunksize=max(1, R // (4 * nw))))
    raw = np.stack(rows)
    report = McReport(summarize(raw, truth.value, estimators, scenarios), R, truth.value,
                      truth.mc_error, spec, raw)
    if strict and report.failure_rate > MAX_FAIL_RATE:
        raise SimulationFailureError(
            f"{report.failure_rate:.1%} of replications failed for at least one estimator"
        )
    return report
