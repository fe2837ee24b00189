"""Stacked-moment (GMM) sandwich variance, ratio delta method and bootstrap.

Every estimator in :mod:`drlate.estimators` solves a set of sample moment
conditions ``sum_i psi(S_i, phi) = 0``. The moment system is assembled from
blocks (propensity score, weighted QMLE scores, level equations) whose
mean Jacobians are written out analytically.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import BootstrapInstabilityError, DrlateError, SingularityError
from .estimators import Component, EstimateResult, IvDesign, NuisanceSet, scheme_weights

MAX_FAIL_SHARE = 0.20
DEFAULT_B = 999
WORKERS_ENV = "DRLATE_WORKERS"


def _scheme_deta(scheme: str, p: np.ndarray) -> np.ndarray:
    """d weight / d logit-index of the propensity score."""
    if scheme == "none":
        return np.zeros_like(p)
    if scheme == "inv_p":
        return -(1.0 - p) / p
    if scheme in ("inv_1mp", "odds"):
        return p / (1.0 - p)
    raise ValueError(scheme)


# ---------------------------------------------------------------- blocks


class _Block:
    name: str
    k: int

    def psi(self, P: dict) -> np.ndarray:
        raise NotImplementedError

    def jac(self, P: dict) -> dict:
        raise NotImplementedError


class _PsBlock(_Block):
    """Logit score ``x (a - G(x g))`` for the arm variable ``a``."""

    def __init__(self, name, X, a):
        self.name, self.X, self.a, self.k = name, X, a, X.shape[1]

    def G(self, P):
        return expit(self.X @ P[self.name])

    def psi(self, P):
        return self.X * (self.a - self.G(P))[:, None]

    def jac(self, P):
        G = self.G(P)
        n = self.X.shape[0]
        return {self.name: -(self.X.T * (G * (1 - G))) @ self.X / n}


class _QmleBlock(_Block):
    """Weighted canonical-link score restricted to the rows used in the fit."""

    def __init__(self, name, comp: Component, v, ps: _PsBlock | None):
        self.name, self.c, self.v, self.ps = name, comp, v, ps
        self.s = comp.rows.astype(float)
        self.k = comp.X.shape[1]

    def mean(self, P):
        return self.c.family.mean(self.c.X @ P[self.name], self.c.bound)

    def dmean(self, P):
        return self.c.family.dmean(self.c.X @ P[self.name], self.c.bound)

    def _weights(self, P):
        if self.c.scheme == "none":
            return self.s, None
        G = self.ps.G(P)
        return self.s * scheme_weights(self.c.scheme, G), G

    def psi(self, P):
        w, _ = self._weights(P)
        return self.c.X * (w * (self.v - self.mean(P)))[:, None]

    def jac(self, P):
        X = self.c.X
        n = X.shape[0]
        w, G = self._weights(P)
        out = {self.name: -(X.T * (w * self.dmean(P))) @ X / n}
        if G is not None:
            dw = self.s * _scheme_deta(self.c.scheme, G)
            r = self.v - self.mean(P)
            out[self.ps.name] = (X.T * (r * dw)) @ self.ps.X / n
        return out


class _LevelBlock(_Block):
    """``c_i * (base_i + sum_k sign_k m_k(X_i) - tau)``."""

    def __init__(self, name, c, base, terms):
        self.name, self.c, self.base, self.terms, self.k = name, c, base, terms, 1

    def psi(self, P):
        val = self.base + sum(sign * blk.mean(P) for sign, blk in self.terms)
        return (self.c * (val - P[self.name][0]))[:, None]

    def jac(self, P):
        n = self.c.shape[0]
        out = {self.name: np.array([[-np.mean(self.c)]])}
        for sign, blk in self.terms:
            out[blk.name] = (sign * (self.c * blk.dmean(P)) @ blk.c.X / n)[None, :]
        return out


class _IpwMeanBlock(_Block):
    """Inverse-probability weighted arm mean, Hajek (normalized) or Horvitz-Thompson."""

    def __init__(self, name, v, s, scheme, normalized, ps: _PsBlock):
        self.name, self.v, self.s, self.scheme = name, v, s, scheme
        self.normalized, self.ps, self.k = normalized, ps, 1

    def psi(self, P):
        w = self.s * scheme_weights(self.scheme, self.ps.G(P))
        th = P[self.name][0]
        val = w * (self.v - th) if self.normalized else w * self.v - th
        return val[:, None]

    def jac(self, P):
        G = self.ps.G(P)
        n = G.shape[0]
        w = self.s * scheme_weights(self.scheme, G)
        dw = self.s * _scheme_deta(self.scheme, G)
        th = P[self.name][0]
        if self.normalized:
            own, r = -np.mean(w), self.v - th
        else:
            own, r = -1.0, self.v
        return {self.name: np.array([[own]]), self.ps.name: ((r * dw) @ self.ps.X / n)[None, :]}


class _AipwMeanBlock(_Block):
    """``s w (v - m) + m - theta`` with an unweighted arm regression ``m``."""

    def __init__(self, name, v, s, scheme, reg: _QmleBlock, ps: _PsBlock):
        self.name, self.v, self.s, self.scheme = name, v, s, scheme
        self.reg, self.ps, self.k = reg, ps, 1

    def psi(self, P):
        w = self.s * scheme_weights(self.scheme, self.ps.G(P))
        m = self.reg.mean(P)
        return (w * (self.v - m) + m - P[self.name][0])[:, None]

    def jac(self, P):
        G = self.ps.G(P)
        n = G.shape[0]
        w = self.s * scheme_weights(self.scheme, G)
        dw = self.s * _scheme_deta(self.scheme, G)
        m = self.reg.mean(P)
        dm = self.reg.dmean(P)
        return {
            self.name: np.array([[-1.0]]),
            self.reg.name: (((1.0 - w) * dm) @ self.reg.c.X / n)[None, :],
            self.ps.name: ((dw * (self.v - m)) @ self.ps.X / n)[None, :],
        }


class _IvBlock(_Block):
    def __init__(self, name, iv: IvDesign):
        self.name, self.iv, self.k = name, iv, iv.reg.shape[1]

    def psi(self, P):
        return self.iv.inst * (self.iv.y - self.iv.reg @ P[self.name])[:, None]

    def jac(self, P):
        n = self.iv.reg.shape[0]
        return {self.name: -self.iv.inst.T @ self.iv.reg / n}


# ---------------------------------------------------------------- system


@dataclass
class MomentSystem:
    """Stacked per-observation moments at the estimate, with their mean Jacobian.

    ``contrast`` maps the parameter vector to ``(tau_y, tau_w)`` (or just
    ``tau_y`` for non-ratio estimands); ``ratio`` says whether the reported
    estimate is ``tau_y / tau_w``.
    """

    psi_rows: np.ndarray
    jacobian_A: np.ndarray
    block_index: dict[str, slice]
    params: np.ndarray
    contrast: np.ndarray
    ratio: bool
    cluster_ids: np.ndarray | None = None
    offset: np.ndarray | None = None
    moment_fn: Callable = field(default=None, repr=False)
    jacobian_fn: Callable = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.psi_rows.shape[0]

    @property
    def p(self) -> int:
        return self.params.shape[0]

    def mean_moments(self, phi) -> np.ndarray:
        return self.moment_fn(phi).mean(axis=0)

    @property
    def taus(self) -> np.ndarray:
        t = self.contrast @ self.params
        return t if self.offset is None else t + self.offset

    @property
    def point(self) -> float:
        t = self.taus
        return float(t[0] / t[1]) if self.ratio else float(t[0])

    def estimand_gradient(self) -> np.ndarray:
        """Gradient of the reported estimate with respect to the parameters."""
        t = self.taus
        g = np.array([1.0 / t[1], -t[0] / t[1] ** 2]) if self.ratio else np.array([1.0])
        return self.contrast.T @ g


def _assemble(blocks: list[_Block], params: dict, contrast_spec: list[dict], ratio: bool,
              cluster=None) -> MomentSystem:
    index, off = {}, 0
    for b in blocks:
        index[b.name] = slice(off, off + b.k)
        off += b.k
    p = off

    def split(phi):
        return {name: np.asarray(phi[sl], dtype=float) for name, sl in index.items()}

    def moment_fn(phi):
        P = split(phi)
        return np.hstack([b.psi(P) for b in blocks])

    def jacobian_fn(phi):
        P = split(phi)
        A = np.zeros((p, p))
        for b in blocks:
            for col, mat in b.jac(P).items():
                A[index[b.name], index[col]] += mat
        return A

    phi = np.concatenate([np.atleast_1d(np.asarray(params[b.name], dtype=float)) for b in blocks])
    C = np.zeros((len(contrast_spec), p))
    for r, spec in enumerate(contrast_spec):
        for (name, j), coef in spec.items():
            C[r, index[name].start + j] += coef
    return MomentSystem(moment_fn(phi), jacobian_fn(phi), index, phi, C, ratio,
                        cluster_ids=None if cluster is None else np.asarray(cluster),
                        moment_fn=moment_fn, jacobian_fn=jacobian_fn)


def stack_moments(d: Dataset, nuisances, estimates: EstimateResult) -> MomentSystem:
    """Build the stacked moment system behind ``estimates``.

    For IPWRA/RA LATE the blocks are, in order: outcome regressions for Z=1
    and Z=0, treatment regressions for Z=1 and Z=0, the instrument
    propensity score, and the two level equations for the numerator and
    denominator. Regressions fixed by one-sided noncompliance are dropped.
    """
    nu = nuisances if nuisances is not None else estimates.nuisances
    method, estimand = estimates.method, estimates.estimand
    cl = d.cluster
    comp = estimates.components
    if isinstance(nu, IvDesign):
        blk = _IvBlock("b", nu)
        return _assemble([blk], {"b": nu.coef}, [{("b", nu.target): 1.0}], False, cl)
    if not isinstance(nu, NuisanceSet):
        raise TypeError("estimate carries no nuisance fits")

    arm = d.z if nu.arm == "instrument" else d.w
    ps = _PsBlock("gamma", nu.ps.design, arm)
    params = {"gamma": nu.ps.fit.coefficients}

    def reg(name, c: Component | None, use_ps=True):
        if c is None:
            return None
        v = d.y if c.response == "y" else d.w
        params[name] = c.fit.coefficients
        return _QmleBlock(name, c, v, ps if (use_ps and c.scheme != "none") else None)

    ones = np.ones(d.n_obs)
    zeros = np.zeros(d.n_obs)

    if estimand in ("LATE",) and method in ("ipwra", "ra"):
        m1, m0 = reg("m1", nu.m1), reg("m0", nu.m0)
        r1, r0 = reg("r1", nu.r1), reg("r0", nu.r0)
        blocks = [b for b in (m1, m0, r1, r0) if b is not None] + [ps]
        ty = _LevelBlock("tau_y", ones, zeros, [(1.0, m1), (-1.0, m0)])
        tw_terms = [(1.0, r1)] if r1 is not None else []
        if r0 is not None:
            tw_terms.append((-1.0, r0))
        tw = _LevelBlock("tau_w", ones, ones if r1 is None else zeros, tw_terms)
        blocks += [ty, tw]
        params.update(tau_y=comp["tau_y"], tau_w=comp["tau_w"])
        return _assemble(blocks, params, [{("tau_y", 0): 1.0}, {("tau_w", 0): 1.0}], True, cl)

    if estimand == "LATE" and method in ("ipw", "ipw_ht"):
        z = d.z
        norm = method == "ipw"
        blocks = [ps]
        spec_y = {("theta1", 0): 1.0, ("theta0", 0): -1.0}
        spec_w = {}
        blocks.append(_IpwMeanBlock("theta1", d.y, z, "inv_p", norm, ps))
        blocks.append(_IpwMeanBlock("theta0", d.y, 1 - z, "inv_1mp", norm, ps))
        params.update(theta1=comp["theta1"], theta0=comp["theta0"])
        if not nu.known_pi1_one:
            blocks.append(_IpwMeanBlock("pi1", d.w, z, "inv_p", norm, ps))
            params["pi1"] = comp["pi1"]
            spec_w[("pi1", 0)] = 1.0
        if not nu.known_pi0_zero:
            blocks.append(_IpwMeanBlock("pi0", d.w, 1 - z, "inv_1mp", norm, ps))
            params["pi0"] = comp["pi0"]
            spec_w[("pi0", 0)] = -1.0
        ms = _assemble(blocks, params, [spec_y, spec_w], True, cl)
        if nu.known_pi1_one:
            ms = _shift_contrast(ms)
        return ms

    if estimand == "LATE" and method == "aipw":
        z = d.z
        m1, m0 = reg("m1", nu.m1), reg("m0", nu.m0)
        r1, r0 = reg("r1", nu.r1), reg("r0", nu.r0)
        blocks = [b for b in (m1, m0, r1, r0) if b is not None] + [ps]
        blocks.append(_AipwMeanBlock("theta1", d.y, z, "inv_p", m1, ps))
        blocks.append(_AipwMeanBlock("theta0", d.y, 1 - z, "inv_1mp", m0, ps))
        params.update(theta1=comp["theta1"], theta0=comp["theta0"])
        spec_y = {("theta1", 0): 1.0, ("theta0", 0): -1.0}
        spec_w = {}
        if r1 is not None:
            blocks.append(_AipwMeanBlock("pi1", d.w, z, "inv_p", r1, ps))
            params["pi1"] = comp["pi1"]
            spec_w[("pi1", 0)] = 1.0
        if r0 is not None:
            blocks.append(_AipwMeanBlock("pi0", d.w, 1 - z, "inv_1mp", r0, ps))
            params["pi0"] = comp["pi0"]
            spec_w[("pi0", 0)] = -1.0
        ms = _assemble(blocks, params, [spec_y, spec_w], True, cl)
        if r1 is None:
            ms = _shift_contrast(ms)
        return ms

    if estimand == "LATT":
        z = d.z
        m0, r0 = reg("m0", nu.m0), reg("r0", nu.r0)
        blocks = [b for b in (m0, r0) if b is not None] + [ps]
        blocks.append(_LevelBlock("tau_y", z, d.y, [(-1.0, m0)]))
        blocks.append(_LevelBlock("tau_w", z, d.w, [(-1.0, r0)] if r0 is not None else []))
        params.update(tau_y=comp["tau_y"], tau_w=comp["tau_w"])
        return _assemble(blocks, params, [{("tau_y", 0): 1.0}, {("tau_w", 0): 1.0}], True, cl)

    if estimand == "ATT":
        m0 = reg("m0", nu.m0)
        blocks = [m0, ps, _LevelBlock("tau_y", d.w, d.y, [(-1.0, m0)])]
        params["tau_y"] = comp["tau_y"]
        return _assemble(blocks, params, [{("tau_y", 0): 1.0}], False, cl)

    if estimand == "ATE":
        m1, m0 = reg("m1", nu.m1), reg("m0", nu.m0)
        blocks = [m1, m0, ps, _LevelBlock("tau_y", ones, zeros, [(1.0, m1), (-1.0, m0)])]
        params["tau_y"] = comp["tau_y"]
        return _assemble(blocks, params, [{("tau_y", 0): 1.0}], False, cl)

    raise ValueError(f"no moment system for {estimand}/{method}")


def _shift_contrast(ms: MomentSystem) -> MomentSystem:
    """pi1 fixed at one makes tau_w = 1 - pi0 affine rather than linear in the parameters."""
    ms.offset = np.array([0.0, 1.0])
    return ms


# ---------------------------------------------------------------- variance


@dataclass
class VarianceResult:
    avar: np.ndarray
    omega: np.ndarray
    se_late: float
    point: float
    gradient: np.ndarray

    @property
    def se(self) -> float:
        return self.se_late


def _meat(psi: np.ndarray, cluster) -> np.ndarray:
    n = psi.shape[0]
    if cluster is None:
        return psi.T @ psi / n
    order = np.argsort(cluster, kind="stable")
    cs = np.asarray(cluster)[order]
    starts = np.flatnonzero(np.r_[True, cs[1:] != cs[:-1]])
    sums = np.add.reduceat(psi[order], starts, axis=0)
    return sums.T @ sums / n


def _equilibrated_svals(M: np.ndarray) -> np.ndarray:
    # rescale rows and columns by the diagonal so the check ignores covariate units
    dg = np.sqrt(np.abs(np.diag(M)))
    if np.any(dg == 0):
        return np.zeros(1)
    return np.linalg.svd(M / np.outer(dg, dg), compute_uv=False)


def _check_invertible(ms: MomentSystem):
    A = ms.jacobian_A
    for name, sl in ms.block_index.items():
        s = _equilibrated_svals(A[sl, sl])
        if s[-1] <= 1e-12 * max(s[0], 1e-300):
            raise SingularityError(f"Jacobian block {name!r} is singular")
    s = _equilibrated_svals(A)
    if s[-1] <= 1e-14 * max(s[0], 1e-300):
        raise SingularityError("Jacobian of the stacked moments is singular")


def sandwich_variance(ms: MomentSystem, *, dof_correction: bool = False) -> VarianceResult:
    """``avar = A^{-1} V A^{-T} / N`` with ``V`` the (optionally cluster-summed) outer product of moments."""
    _check_invertible(ms)
    n, p = ms.n, ms.p
    V = _meat(ms.psi_rows, ms.cluster_ids)
    Ainv = np.linalg.inv(ms.jacobian_A)
    avar = Ainv @ V @ Ainv.T / n
    avar = 0.5 * (avar + avar.T)
    if dof_correction:
        avar *= n / (n - p)
    omega = ms.contrast @ avar @ ms.contrast.T
    t = ms.taus
    if ms.ratio:
        se = ratio_delta_se(omega, t[0], t[1])
    else:
        se = float(np.sqrt(max(omega[0, 0], 0.0)))
    point, grad = ms.point, ms.estimand_gradient()
    return VarianceResult(avar, omega, se, float(point), grad)


def ratio_delta_se(omega, tau_y: float, tau_w: float) -> float:
    """Delta-method standard error of ``tau_y / tau_w`` given the covariance ``omega`` of the pair."""
    if tau_w == 0:
        raise ZeroDivisionError("tau_w is zero")
    om = np.asarray(omega, dtype=float)
    v = (om[0, 0] / tau_w ** 2 + tau_y ** 2 * om[1, 1] / tau_w ** 4
         - 2.0 * tau_y * om[0, 1] / tau_w ** 3)
    return float(np.sqrt(max(v, 0.0)))


def analytic_se(result: EstimateResult, d: Dataset, *, dof_correction: bool = False) -> EstimateResult:
    """Attach the sandwich standard error and normal 95% interval to ``result``."""
    ms = stack_moments(d, result.nuisances, result)
    vr = sandwich_variance(ms, dof_correction=dof_correction)
    return result.with_se(vr.se, se_method="analytic", clustered=d.cluster is not None)


# ---------------------------------------------------------------- bootstrap


@dataclass
class BootstrapResult:
    se: float
    percentile_ci: tuple[float, float]
    normal_ci: tuple[float, float] | None
    n_failed: int
    replicates: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"se": self.se, "percentile_ci": list(self.percentile_ci),
                "normal_ci": None if self.normal_ci is None else list(self.normal_ci),
                "n_failed": self.n_failed, "B": int(self.replicates.shape[0])}


def _workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def resample_indices(d: Dataset, rng: np.random.Generator, cluster: bool) -> np.ndarray:
    if cluster and d.cluster is not None:
        ids, inv = np.unique(d.cluster, return_inverse=True)
        members = np.split(np.argsort(inv, kind="stable"), np.cumsum(np.bincount(inv))[:-1])
        pick = rng.integers(0, ids.shape[0], ids.shape[0])
        return np.concatenate([members[g] for g in pick])
    return rng.integers(0, d.n_obs, d.n_obs)


def _point(fn, data):
    out = fn(data)
    return out.point if isinstance(out, EstimateResult) else float(out)


def _replicate(args):
    d, fns, seed_seq, cluster = args
    rng = np.random.default_rng(seed_seq)
    idx = resample_indices(d, rng, cluster)
    try:
        db = d.take(idx)
        return [_point(f, db) for f in fns]
    except (DrlateError, np.linalg.LinAlgError, FloatingPointError):
        return [np.nan] * len(fns)


def paired_bootstrap(d: Dataset, fns: list, B: int, seed: int = 0, cluster: bool = True,
                     workers: int | None = None) -> np.ndarray:
    """Run every estimator in ``fns`` on the same ``B`` resamples.

    Returns a ``(B, len(fns))`` array with NaN rows for failed replicates.
    Each replicate draws from its own child of ``SeedSequence(seed)`` so the
    output does not depend on the number of workers.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    children = np.random.SeedSequence(seed).spawn(B)
    tasks = [(d, fns, children[b], cluster) for b in range(B)]
    nw = _workers(workers)
    if nw == 1:
        rows = [_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(nw) as ex:
            rows = list(ex.map(_replicate, tasks, chunksize=max(1, B // (4 * nw))))
    return np.asarray(rows, dtype=float)


def summarize_replicates(reps: np.ndarray, point: float | None = None) -> BootstrapResult:
    B = reps.shape[0]
    ok = np.isfinite(reps)
    n_failed = int(B - ok.sum())
    if n_failed > MAX_FAIL_SHARE * B:
        raise BootstrapInstabilityError(f"{n_failed} of {B} bootstrap replicates failed")
    vals = np.sort(reps[ok])
    se = float(np.std(vals, ddof=1)) if vals.shape[0] > 1 else 0.0
    pct = (float(np.quantile(vals, 0.025)), float(np.quantile(vals, 0.975)))
    normal = None if point is None else (point - 1.959963984540054 * se, point + 1.959963984540054 * se)
    return BootstrapResult(se, pct, normal, n_failed, reps)


def bootstrap_se(d: Dataset, estimator_spec, B: int = DEFAULT_B, seed: int = 0,
                 cluster: bool = True, workers: int | None = None) -> BootstrapResult:
    """Nonparametric bootstrap SE, refitting every nuisance model per resample.

    ``estimator_spec`` is any callable ``Dataset -> EstimateResult | float``.
    Resampling is by cluster when the dataset has a cluster role and
    ``cluster`` is true.
    """
    reps = paired_bootstrap(d, [estimator_spec], B, seed, cluster, workers)[:, 0]
    try:
        point = _point(estimator_spec, d)
    except DrlateError:
        point = None
    return summarize_replicates(reps, point)
