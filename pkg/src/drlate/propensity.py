"""Instrument and treatment propensity scores plus overlap diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CovariateTransform, Dataset, expand_covariates
from .errors import DegenerateError
from .qmle import BERNOULLI, FitResult, fit_weighted_qmle

N_BINS = 20
DEFAULT_EPS = 0.01


@dataclass
class PropensityFit:
    fit: FitResult
    probabilities: np.ndarray
    target: str  # "instrument" or "treatment"
    transform: CovariateTransform = field(default_factory=CovariateTransform)
    design: np.ndarray | None = field(default=None, repr=False)


def _fit(d: Dataset, t: CovariateTransform, target: str) -> PropensityFit:
    X = expand_covariates(d, t)
    resp = d.z if target == "instrument" else d.w
    fit = fit_weighted_qmle(X, resp, None, BERNOULLI)
    p = fit.fitted_means
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DegenerateError(f"{target} propensity hits 0 or 1 in floating point")
    return PropensityFit(fit, p, target, t, X)


def fit_instrument_propensity(d: Dataset, t: CovariateTransform) -> PropensityFit:
    """Unweighted logit of the instrument on the expanded covariates."""
    return _fit(d, t, "instrument")


def fit_treatment_propensity(d: Dataset, t: CovariateTransform) -> PropensityFit:
    """Unweighted logit of the treatment on the expanded covariates."""
    if d.w.min() == d.w.max():
        raise DegenerateError("treatment takes a single value")
    return _fit(d, t, "treatment")


@dataclass
class OverlapReport:
    min_p: float
    max_p: float
    eps: float
    share_below: float
    share_above: float
    bin_edges: np.ndarray
    counts_0: np.ndarray
    counts_1: np.ndarray
    mode: str = "late"

    @property
    def violation(self) -> float:
        """Share of units outside the overlap band relevant for ``mode``.

        LATT/ATT only require probabilities bounded away from one.
        """
        if self.mode == "late":
            return self.share_below + self.share_above
        return self.share_above

    def to_dict(self) -> dict:
        return {
            "min_p": self.min_p,
            "max_p": self.max_p,
            "eps": self.eps,
            "share_below": self.share_below,
            "share_above": self.share_above,
            "mode": self.mode,
            "violation": self.violation,
            "bin_edges": self.bin_edges.tolist(),
            "counts_0": self.counts_0.tolist(),
            "counts_1": self.counts_1.tolist(),
        }

    def to_text(self, width: int = 30) -> str:
        top = max(1, int(max(self.counts_0.max(), self.counts_1.max())))
        lines = [
            f"overlap ({self.mode}): min={self.min_p:.4f} max={self.max_p:.4f} "
            f"below {self.eps:g}: {self.share_below:.4f} above {1 - self.eps:g}: {self.share_above:.4f}",
            f"{'bin':>13}  {'group 0':<{width}}  {'group 1':<{width}}",
        ]
        for j in range(len(self.counts_0)):
            a = "#" * int(round(width * self.counts_0[j] / top))
            b = "#" * int(round(width * self.counts_1[j] / top))
            lines.append(f"{self.bin_edges[j]:.2f}-{self.bin_edges[j + 1]:.2f}  {a:<{width}}  {b:<{width}}")
        return "\n".join(lines)


def overlap_report(p: PropensityFit, treatment_indicator, eps: float = DEFAULT_EPS,
                   mode: str = "late") -> OverlapReport:
    """Summarise fitted probabilities, split by the binary indicator they model."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    prob = np.asarray(p.probabilities)
    g = np.asarray(treatment_indicator)
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    c0, _ = np.histogram(prob[g == 0], bins=edges)
    c1, _ = np.histogram(prob[g == 1], bins=edges)
    n = prob.shape[0]
    return OverlapReport(
        min_p=float(prob.min()),
        max_p=float(prob.max()),
        eps=eps,
        share_below=float(np.count_nonzero(prob < eps)) / n,
        share_above=float(np.count_nonzero(prob > 1 - eps)) / n,
        bin_edges=edges,
        counts_0=c0,
        counts_1=c1,
        mode=mode,
    )
