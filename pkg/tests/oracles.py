"""Reference computations that do not reuse package code paths."""

import numpy as np
from scipy import stats
from scipy.special import expit


def loglik(kind, beta, X, y, w, bound=None):
    """Weighted log-likelihood written with scipy.stats densities."""
    eta = X @ beta
    if kind == "gaussian":
        ll = stats.norm.logpdf(y, loc=eta)
    elif kind == "bernoulli":
        ll = stats.binom.logpmf(y, 1, expit(eta))
    elif kind == "binomial":
        ll = stats.binom.logpmf(y, bound, expit(eta))
    elif kind == "poisson":
        ll = stats.poisson.logpmf(y, np.exp(eta))
    else:
        raise ValueError(kind)
    return float(np.sum(w * ll))


def grid_argmax_2d(f, center=(0.0, 0.0), half_width=4.0, points=201, final_step=1e-6):
    """Maximise ``f(b0, b1)`` by repeatedly zooming a dense square grid."""
    c = np.asarray(center, dtype=float)
    hw = half_width
    while True:
        g0 = np.linspace(c[0] - hw, c[0] + hw, points)
        g1 = np.linspace(c[1] - hw, c[1] + hw, points)
        vals = np.array([[f(a, b) for b in g1] for a in g0])
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        c = np.array([g0[i], g1[j]])
        step = 2 * hw / (points - 1)
        if step < final_step:
            return c
        hw = 4 * step


def grid_argmax_vectorized(kind, X, y, w, bound=None, **kw):
    """Grid oracle for a 2-column design; evaluates a whole grid row at once."""

    def f_row(a, bs):
        B = np.vstack([np.full_like(bs, a), bs])
        eta = X @ B
        if kind == "gaussian":
            ll = stats.norm.logpdf(y[:, None], loc=eta)
        elif kind == "bernoulli":
            ll = stats.binom.logpmf(y[:, None], 1, expit(eta))
        elif kind == "binomial":
            ll = stats.binom.logpmf(y[:, None], bound[:, None], expit(eta))
        else:
            ll = stats.poisson.logpmf(y[:, None], np.exp(eta))
        return (w[:, None] * ll).sum(axis=0)

    c = np.asarray(kw.get("center", (0.0, 0.0)), dtype=float)
    hw, points, final_step = kw.get("half_width", 4.0), kw.get("points", 101), kw.get("final_step", 1e-6)
    while True:
        g0 = np.linspace(c[0] - hw, c[0] + hw, points)
        g1 = np.linspace(c[1] - hw, c[1] + hw, points)
        vals = np.array([f_row(a, g1) for a in g0])
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        c = np.array([g0[i], g1[j]])
        step = 2 * hw / (points - 1)
        if step < final_step:
            return c
        hw = 4 * step


def central_gradient(f, theta, rel_step=1e-6):
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for j in range(theta.shape[0]):
        h = rel_step * (1.0 + abs(theta[j]))
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def qmle_instance(kind, seed, n=200):
    """Random 2-coefficient problem with positive weights."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x])
    beta = rng.uniform(-1.0, 1.0, 2)
    w = rng.uniform(0.2, 3.0, n)
    eta = X @ beta
    bound = None
    if kind == "gaussian":
        y = eta + rng.normal(size=n)
    elif kind == "bernoulli":
        y = (rng.random(n) < expit(eta)).astype(float)
    elif kind == "binomial":
        bound = rng.integers(1, 6, n).astype(float)
        y = rng.binomial(bound.astype(int), expit(eta)).astype(float)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return X, y, w, bound
