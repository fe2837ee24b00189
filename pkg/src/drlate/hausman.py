"""Hausman-style comparisons of two estimators run on the same data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag
from scipy.stats import norm

from .data import Dataset
from .errors import PreconditionError
from .estimators import EstimateResult, EstimatorSpec, Models
from .inference import (
    DEFAULT_B,
    _check_invertible,
    _meat,
    paired_bootstrap,
    stack_moments,
    summarize_replicates,
)

FLAVORS = {
    "latt_vs_att": ("dr_latt", "dr_att"),
    "late_vs_latt": ("dr_late", "dr_latt"),
    "iv_vs_late": ("iv", "dr_late"),
    "iv_vs_latt": ("iv", "dr_latt"),
}


@dataclass
class ComparisonResult:
    left: EstimateResult
    right: EstimateResult
    diff: float
    se_diff: float
    t_stat: float
    p_value: float
    method_se: str
    n_failed: int = 0

    def to_dict(self) -> dict:
        return {
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
            "diff": self.diff,
            "se_diff": self.se_diff,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
            "method_se": self.method_se,
            "n_failed": self.n_failed,
        }


def _t_and_p(diff: float, se: float) -> tuple[float, float]:
    if se == 0:
        # exact tie convention: identical estimators give p = 1
        if diff == 0:
            return 0.0, 1.0
        return float(np.sign(diff) * np.inf), 0.0
    t = diff / se
    return float(t), float(2.0 * norm.sf(abs(t)))


def comparison_specs(flavor: str, models: Models, *, known_pi0_zero: bool = False,
                     known_pi1_one: bool = False) -> tuple[EstimatorSpec, EstimatorSpec]:
    if flavor not in FLAVORS:
        raise ValueError(f"unknown flavor {flavor!r}; choose from {sorted(FLAVORS)}")
    a, b = FLAVORS[flavor]
    flags = dict(known_pi0_zero=known_pi0_zero, known_pi1_one=known_pi1_one)
    return EstimatorSpec(a, models, **flags), EstimatorSpec(b, models, **flags)


def joint_gmm_se(d: Dataset, left: EstimateResult, right: EstimateResult) -> float:
    """SE of ``left - right`` from the two moment systems stacked into one."""
    m1 = stack_moments(d, left.nuisances, left)
    m2 = stack_moments(d, right.nuisances, right)
    _check_invertible(m1)
    _check_invertible(m2)
    psi = np.hstack([m1.psi_rows, m2.psi_rows])
    A = block_diag(m1.jacobian_A, m2.jacobian_A)
    V = _meat(psi, d.cluster)
    Ainv = np.linalg.inv(A)
    avar = Ainv @ V @ Ainv.T / psi.shape[0]
    g = np.concatenate([m1.estimand_gradient(), -m2.estimand_gradient()])
    return float(np.sqrt(max(g @ avar @ g, 0.0)))


def hausman_dr_test(d: Dataset, spec_left, spec_right, se_method: str = "bootstrap", *,
                    B: int = DEFAULT_B, seed: int = 0, cluster: bool = True,
                    workers: int | None = None, require_one_sided: bool = False,
                    override: bool = False) -> ComparisonResult:
    """Test equality of two estimands estimated on the same sample.

    ``se_method`` is ``"bootstrap"`` (paired: both estimators see the same
    resamples) or ``"joint_gmm"``. With ``require_one_sided`` the sample
    must satisfy W=0 whenever Z=0 unless ``override`` is set.
    """
    if require_one_sided and not override and np.any(d.w[d.z == 0] != 0):
        k = int(np.count_nonzero(d.w[d.z == 0]))
        raise PreconditionError(
            f"one-sided noncompliance fails in-sample: {k} treated units with Z=0 "
            "(LATT and ATT then differ by construction)"
        )
    left, right = spec_left(d), spec_right(d)
    diff = left.point - right.point
    n_failed = 0
    if se_method == "bootstrap":
        reps = paired_bootstrap(d, [spec_left, spec_right], B, seed, cluster, workers)
        bad = ~np.all(np.isfinite(reps), axis=1)
        dr = np.where(bad, np.nan, reps[:, 0] - reps[:, 1])
        summary = summarize_replicates(dr)
        se, n_failed = summary.se, summary.n_failed
    elif se_method == "joint_gmm":
        se = joint_gmm_se(d, left, right)
    else:
        raise ValueError("se_method must be 'bootstrap' or 'joint_gmm'")
    t, p = _t_and_p(diff, se)
    return ComparisonResult(left, right, float(diff), float(se), t, p, se_method, n_failed)


def flavor_test(d: Dataset, flavor: str, models: Models, se_method: str = "bootstrap", *,
                known_pi0_zero: bool = False, override: bool = False, **kw) -> ComparisonResult:
    """Run one of the named comparisons in :data:`FLAVORS`.

    For ``latt_vs_att`` the no-always-takers restriction is imposed whenever
    it holds in-sample, since the treatment regression on Z=0 is then degenerate.
    """
    if flavor == "latt_vs_att" and not np.any(d.w[d.z == 0] != 0):
        known_pi0_zero = True
    left, right = comparison_specs(flavor, models, known_pi0_zero=known_pi0_zero)
    return hausman_dr_test(d, left, right, se_method, require_one_sided=flavor == "latt_vs_att",
                           override=override, **kw)
