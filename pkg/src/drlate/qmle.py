"""Weighted quasi-maximum likelihood in the linear exponential family.

Only canonical links are supported: with a canonical link the score of
observation ``i`` is ``w_i x_i (y_i - m(x_i b))`` and the first-order
conditions are the residual-orthogonality conditions used throughout the
package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, SeparationError, ShapeError, SingularityError

TOL = 1e-8
MAX_ITER = 100
SEPARATION_CAP = 30.0

_KINDS = ("gaussian_identity", "bernoulli_logit", "binomial_logit", "poisson_log")
_ALIASES = {
    "gaussian": "gaussian_identity",
    "linear": "gaussian_identity",
    "bernoulli": "bernoulli_logit",
    "logit": "bernoulli_logit",
    "binomial": "binomial_logit",
    "poisson": "poisson_log",
}


@dataclass(frozen=True)
class LefFamily:
    """QLL / canonical mean pair.

    ``bound_column`` names the per-row upper bound for the binomial family.
    """

    kind: str
    bound_column: str | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in _KINDS:
            raise ValueError(f"unknown family {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "binomial_logit" and self.bound_column is None:
            raise ValueError("binomial_logit needs a bound column")

    @classmethod
    def parse(cls, text: str) -> "LefFamily":
        """``gaussian``, ``bernoulli``, ``poisson`` or ``binomial:<column>``."""
        name, _, bound = text.partition(":")
        return cls(name.strip(), bound.strip() or None)

    @property
    def is_logit(self) -> bool:
        return self.kind in ("bernoulli_logit", "binomial_logit")

    def mean(self, eta, bound=None):
        if self.kind == "gaussian_identity":
            return eta
        if self.kind == "bernoulli_logit":
            return expit(eta)
        if self.kind == "binomial_logit":
            return _need_bound(bound) * expit(eta)
        return np.exp(eta)

    def dmean(self, eta, bound=None):
        """Derivative of the mean with respect to the index."""
        if self.kind == "gaussian_identity":
            return np.ones_like(eta)
        if self.kind == "bernoulli_logit":
            p = expit(eta)
            return p * (1.0 - p)
        if self.kind == "binomial_logit":
            p = expit(eta)
            return _need_bound(bound) * p * (1.0 - p)
        return np.exp(eta)

    def qll(self, y, eta, bound=None):
        """Per-observation quasi-log-likelihood, up to terms free of ``eta``."""
        if self.kind == "gaussian_identity":
            return -0.5 * (y - eta) ** 2
        if self.kind == "poisson_log":
            return y * eta - np.exp(eta)
        n = 1.0 if self.kind == "bernoulli_logit" else _need_bound(bound)
        # y*log(p) + (n-y)*log(1-p) written stably in eta
        return y * eta - n * np.logaddexp(0.0, eta)

    def check_support(self, y, bound=None):
        if self.kind == "bernoulli_logit" and (np.any(y < 0) or np.any(y > 1)):
            raise ValueError("bernoulli_logit response must lie in [0, 1]")
        if self.kind == "binomial_logit":
            b = _need_bound(bound)
            if np.any(y < 0) or np.any(y > b) or np.any(b <= 0):
                raise ValueError("binomial_logit response must lie in [0, B] with B > 0")
        if self.kind == "poisson_log" and np.any(y < 0):
            raise ValueError("poisson_log response must be nonnegative")

    def __str__(self):
        return self.kind if self.bound_column is None else f"{self.kind}:{self.bound_column}"


def _need_bound(bound):
    if bound is None:
        raise ValueError("binomial_logit needs per-row bounds")
    return bound


GAUSSIAN = LefFamily("gaussian_identity")
BERNOULLI = LefFamily("bernoulli_logit")
POISSON = LefFamily("poisson_log")


@dataclass
class FitResult:
    """Outcome of :func:`fit_weighted_qmle`.

    ``score_rows`` holds the weighted per-observation score contributions
    ``w_i x_i (y_i - m_i)`` on the rows used in the fit. ``max_abs_foc`` is
    the largest first-order condition ``|sum_i w_i x~_ij (y_i - m_i)| / sum_i w_i``
    with columns scaled to unit RMS.
    """

    coefficients: np.ndarray
    fitted_means: np.ndarray
    score_rows: np.ndarray
    converged: bool
    iterations: int
    max_abs_foc: float
    family: LefFamily = GAUSSIAN
    bound: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.coefficients.shape[0]


def _as_inputs(X, y, w):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ShapeError("design matrix must be two-dimensional")
    n = X.shape[0]
    if y.shape != (n,):
        raise ShapeError(f"response has shape {y.shape}, expected ({n},)")
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ShapeError(f"weights have shape {w.shape}, expected ({n},)")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    return X, y, w


def weighted_qll(beta, X, y, w, fam: LefFamily, bound=None) -> float:
    """Weighted quasi-log-likelihood ``sum_i w_i q(y_i, m(x_i b))``."""
    eta = np.asarray(X) @ np.asarray(beta, dtype=float)
    return float(np.sum(w * fam.qll(y, eta, bound)))


def fit_weighted_qmle(X, y, w=None, fam: LefFamily = GAUSSIAN, bound=None, *,
                      tol: float = TOL, max_iter: int = MAX_ITER) -> FitResult:
    """Solve ``sum_i w_i x_i' [y_i - m(x_i b)] = 0`` by damped Newton.

    Columns are rescaled to unit RMS (over rows with positive weight) before
    iterating; coefficients are returned on the original scale.

    Raises
    ------
    SingularityError
        The weighted design is rank deficient.
    SeparationError
        Logit or log-link coefficients run past the divergence cap.
    ConvergenceError
        ``max_iter`` reached without meeting ``tol``.
    """
    X, y, w = _as_inputs(X, y, w)
    if bound is not None:
        bound = np.asarray(bound, dtype=float)
    fam.check_support(y, bound)
    n, k = X.shape
    active = w > 0
    if active.sum() < k:
        raise SingularityError(f"only {int(active.sum())} rows with positive weight for {k} coefficients")

    scale = np.sqrt(np.mean(X[active] ** 2, axis=0))
    if np.any(scale == 0):
        raise SingularityError(f"design column(s) {np.flatnonzero(scale == 0).tolist()} are identically zero")
    Xs = X / scale
    sw = w.sum()
    gram = (Xs.T * w) @ Xs / sw
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-10 * ev[-1]:
        raise SingularityError("weighted design matrix is rank deficient")

    ya = y[active]
    # scale for the FOC tolerance so that it is unit-free in y
    yscale = max(1.0, float(np.sqrt(np.sum(w * y * y) / sw)))

    if fam.kind != "gaussian_identity":
        lo = ya.max() <= 0
        hi = False if fam.kind == "poisson_log" else np.all(ya >= (1.0 if bound is None else bound[active]))
        if lo or hi:
            raise SeparationError(f"{fam.kind}: response has no variation at the support boundary")

    def foc(theta):
        eta = Xs @ theta
        r = y - fam.mean(eta, bound)
        return Xs.T @ (w * r) / sw, eta

    def objective(eta):
        return np.sum(w * fam.qll(y, eta, bound)) / sw

    theta = np.zeros(k)
    if fam.kind == "poisson_log":
        # start from the weighted-mean intercept when a constant column exists
        icpt = np.flatnonzero(np.all(np.isclose(X[active], X[active][0]), axis=0))
        if icpt.size:
            j = icpt[0]
            theta[j] = np.log(np.sum(w * y) / sw) / Xs[active][0, j]

    if fam.kind == "gaussian_identity":
        theta = np.linalg.solve(gram, Xs.T @ (w * y) / sw)
        g, eta = foc(theta)
        # one refinement step absorbs rounding in the normal equations
        theta = theta + np.linalg.solve(gram, g)
        g, eta = foc(theta)
        it = 1
        conv = bool(np.max(np.abs(g)) <= tol * yscale)
        if not conv:
            raise ConvergenceError("least-squares solve did not meet tolerance", theta / scale)
        return _finish(theta, scale, X, y, w, fam, bound, g, it, conv)

    g, eta = foc(theta)
    obj = objective(eta)
    it = 0
    conv = bool(np.max(np.abs(g)) <= tol * yscale)
    stalled = False
    while not conv and it < max_iter:
        it += 1
        d = fam.dmean(eta, bound)
        H = (Xs.T * (w * d)) @ Xs / sw
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            eta_c = Xs @ cand
            obj_c = objective(eta_c)
            if np.isfinite(obj_c) and obj_c >= obj - 1e-14 * abs(obj):
                break
            t *= 0.5
        else:
            stalled = True
            break
        theta, obj = cand, obj_c
        g, eta = foc(theta)
        conv = bool(np.max(np.abs(g)) <= tol * yscale)
        if np.max(np.abs(theta)) > 4 * SEPARATION_CAP:
            break

    if conv and it > 0:
        # one extra Newton step: Newton converges quadratically, so this takes
        # the FOC from ~tol down to rounding level at negligible cost
        H = (Xs.T * (w * fam.dmean(eta, bound))) @ Xs / sw
        try:
            cand = theta + np.linalg.solve(H, g)
            g_c, eta_c = foc(cand)
            if np.max(np.abs(g_c)) < np.max(np.abs(g)):
                theta, g, eta = cand, g_c, eta_c
        except np.linalg.LinAlgError:
            pass

    if np.max(np.abs(theta)) > SEPARATION_CAP:
        raise SeparationError(
            f"{fam.kind}: coefficient magnitude {np.max(np.abs(theta)):.1f} exceeds {SEPARATION_CAP:g} "
            "on the unit-RMS scale (perfect separation?)"
        )
    if not conv:
        why = "line search stalled" if stalled else f"no convergence after {it} iterations"
        raise ConvergenceError(f"{fam.kind}: {why}; max |FOC| = {np.max(np.abs(g)):.3g}", theta / scale)
    return _finish(theta, scale, X, y, w, fam, bound, g, it, conv)


def _finish(theta, scale, X, y, w, fam, bound, g, it, conv):
    beta = theta / scale
    eta = X @ beta
    m = fam.mean(eta, bound)
    return FitResult(
        coefficients=beta,
        fitted_means=m,
        score_rows=X * (w * (y - m))[:, None],
        converged=conv,
        iterations=it,
        max_abs_foc=float(np.max(np.abs(g))),
        family=fam,
        bound=bound,
    )


def predict_mean(fit: FitResult, X_new, bound=None) -> np.ndarray:
    """Apply the fitted family's canonical mean function to new rows."""
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim != 2 or X_new.shape[1] != fit.k:
        raise ShapeError(f"design has shape {X_new.shape}, expected (n, {fit.k})")
    return fit.family.mean(X_new @ fit.coefficients, bound)


def score_rows(fit: FitResult, X, y, w=None, fam: LefFamily | None = None, bound=None) -> np.ndarray:
    """Per-observation weighted scores ``w_i x_i (y_i - m_i)`` at the fitted coefficients."""
    X, y, w = _as_inputs(X, y, w)
    if X.shape[1] != fit.k:
        raise ShapeError(f"design has {X.shape[1]} columns, fit has {fit.k} coefficients")
    fam = fit.family if fam is None else fam
    m = fam.mean(X @ fit.coefficients, bound)
    return X * (w * (y - m))[:, None]


def qll_gradient(beta, X, y, w, fam: LefFamily, bound=None) -> np.ndarray:
    """Analytic gradient of :func:`weighted_qll`."""
    eta = np.asarray(X) @ np.asarray(beta, dtype=float)
    return np.asarray(X).T @ (w * (y - fam.mean(eta, bound)))
