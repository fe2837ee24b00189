import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drlate.errors import ConvergenceError, SeparationError, ShapeError, SingularityError
from drlate.qmle import (
    BERNOULLI,
    GAUSSIAN,
    POISSON,
    LefFamily,
    fit_weighted_qmle,
    predict_mean,
    qll_gradient,
    score_rows,
    weighted_qll,
)
from oracles import central_gradient, grid_argmax_vectorized, loglik, qmle_instance

FAMILIES = {
    "gaussian": GAUSSIAN,
    "bernoulli": BERNOULLI,
    "poisson": POISSON,
    "binomial": LefFamily("binomial_logit", "B"),
}


class TestOracles:
    @pytest.mark.parametrize("kind", list(FAMILIES))
    @pytest.mark.parametrize("seed", range(4))
    def test_grid_search_argmax(self, kind, seed):
        X, y, w, bound = qmle_instance(kind, seed)
        fit = fit_weighted_qmle(X, y, w, FAMILIES[kind], bound)
        ref = grid_argmax_vectorized(kind, X, y, w, bound)
        npt.assert_allclose(fit.coefficients, ref, atol=1e-3)

    @pytest.mark.parametrize("kind", list(FAMILIES))
    @pytest.mark.parametrize("seed", range(4))
    def test_score_matches_finite_differences(self, kind, seed):
        X, y, w, bound = qmle_instance(kind, seed)
        theta = np.random.default_rng(seed + 100).uniform(-1, 1, 2)
        fd = central_gradient(lambda b: loglik(kind, b, X, y, w, bound), theta)
        an = qll_gradient(theta, X, y, w, FAMILIES[kind], bound)
        assert np.linalg.norm(fd - an) <= 1e-6 * np.linalg.norm(an)

    @pytest.mark.parametrize("kind", list(FAMILIES))
    def test_qll_differs_from_loglik_by_a_constant(self, kind):
        X, y, w, bound = qmle_instance(kind, 9)
        a, b = np.array([0.1, -0.2]), np.array([0.4, 0.3])
        fam = FAMILIES[kind]
        d_pkg = weighted_qll(a, X, y, w, fam, bound) - weighted_qll(b, X, y, w, fam, bound)
        d_ref = loglik(kind, a, X, y, w, bound) - loglik(kind, b, X, y, w, bound)
        npt.assert_allclose(d_pkg, d_ref, rtol=1e-10)


class TestGaussian:
    def test_matches_normal_equations(self):
        rng = np.random.default_rng(1)
        n = 300
        X = np.column_stack([np.ones(n), rng.normal(size=(n, 3)) * [1.0, 1e4, 50.0]])
        y = X @ [1.0, 2.0, 3e-4, -0.1] + rng.normal(size=n)
        w = rng.uniform(0.5, 2.0, n)
        fit = fit_weighted_qmle(X, y, w)
        ref = np.linalg.solve((X.T * w) @ X, (X.T * w) @ y)
        npt.assert_allclose(fit.coefficients, ref, rtol=1e-10)

    def test_zero_weight_rows_ignored(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([np.ones(40), rng.normal(size=40)])
        y = rng.normal(size=40)
        w = np.r_[np.ones(20), np.zeros(20)]
        full = fit_weighted_qmle(X, y, w)
        sub = fit_weighted_qmle(X[:20], y[:20])
        npt.assert_allclose(full.coefficients, sub.coefficients, rtol=1e-10)
        npt.assert_array_equal(full.score_rows[20:], 0.0)

    def test_weighted_mean(self):
        fit = fit_weighted_qmle(np.ones((3, 1)), np.array([1.0, 2.0, 4.0]), np.array([1.0, 2.0, 0.25]))
        npt.assert_allclose(fit.coefficients, [6.0 / 3.25])


class TestNewton:
    def test_logit_intercept_is_log_odds(self):
        y = np.r_[np.ones(75), np.zeros(25)]
        fit = fit_weighted_qmle(np.ones((100, 1)), y, fam=BERNOULLI)
        npt.assert_allclose(fit.coefficients, [np.log(3.0)], rtol=1e-12)
        assert fit.converged and fit.iterations < 10

    def test_poisson_intercept_is_log_mean(self):
        y = np.array([0.0, 1, 2, 3, 4, 8])
        fit = fit_weighted_qmle(np.ones((6, 1)), y, fam=POISSON)
        npt.assert_allclose(fit.coefficients, [np.log(3.0)], rtol=1e-12)

    def test_scores_sum_to_zero(self):
        X, y, w, _ = qmle_instance("poisson", 5)
        fit = fit_weighted_qmle(X, y, w, POISSON)
        npt.assert_allclose(fit.score_rows.sum(axis=0), 0.0, atol=1e-8 * np.abs(fit.score_rows).sum())
        npt.assert_allclose(score_rows(fit, X, y, w), fit.score_rows)

    def test_fractional_response_logit(self):
        rng = np.random.default_rng(4)
        X = np.column_stack([np.ones(200), rng.normal(size=200)])
        y = rng.uniform(size=200)
        fit = fit_weighted_qmle(X, y, fam=BERNOULLI)
        npt.assert_allclose(X.T @ (y - fit.fitted_means), 0.0, atol=1e-10)


class TestErrors:
    def test_perfect_separation(self):
        x = np.linspace(-1, 1, 40)
        X = np.column_stack([np.ones(40), x])
        with pytest.raises(SeparationError):
            fit_weighted_qmle(X, (x > 0).astype(float), fam=BERNOULLI)

    def test_constant_response(self):
        with pytest.raises(SeparationError):
            fit_weighted_qmle(np.ones((10, 1)), np.zeros(10), fam=BERNOULLI)

    def test_rank_deficient(self):
        x = np.arange(10.0)
        with pytest.raises(SingularityError):
            fit_weighted_qmle(np.column_stack([np.ones(10), x, 2 * x]), x)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fit_weighted_qmle(np.ones((5, 1)), np.ones(4))
        fit = fit_weighted_qmle(np.ones((5, 1)), np.arange(5.0))
        with pytest.raises(ShapeError):
            predict_mean(fit, np.ones((3, 2)))

    def test_convergence_error_carries_iterate(self):
        X, y, w, _ = qmle_instance("bernoulli", 3)
        with pytest.raises(ConvergenceError) as info:
            fit_weighted_qmle(X, y, w, BERNOULLI, max_iter=1, tol=1e-30)
        assert info.value.last_iterate.shape == (2,)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            LefFamily("gamma_log")
        assert LefFamily.parse("binomial:visits").bound_column == "visits"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["gaussian", "bernoulli", "poisson"]))
def test_fit_is_permutation_invariant(seed, kind):
    X, y, w, _ = qmle_instance(kind, seed, n=80)
    perm = np.random.default_rng(seed).permutation(80)
    a = fit_weighted_qmle(X, y, w, FAMILIES[kind])
    b = fit_weighted_qmle(X[perm], y[perm], w[perm], FAMILIES[kind])
    npt.assert_allclose(a.coefficients, b.coefficients, rtol=1e-8, atol=1e-10)
