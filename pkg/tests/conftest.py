import numpy as np
import pytest
from scipy.special import expit

from drlate.data import Dataset, Roles

ACCEPTANCE_LINES = []


def make_iv_data(n=600, seed=0, one_sided=False, clusters=None, effect=2.0, binary_y=False):
    """Small confounded-instrument design with two covariates.

    The instrument propensity and treatment take-up both depend on the
    covariates; ``clusters`` groups consecutive rows.
    """
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    z = (rng.random(n) < expit(0.2 + 0.6 * x1 - 0.3 * x2)).astype(float)
    complier = (rng.random(n) < expit(0.4 - 0.5 * x2)).astype(float)
    always = np.zeros(n) if one_sided else (rng.random(n) < 0.12).astype(float)
    w = np.maximum(z * complier, always)
    idx = 1.0 + effect * w + x1 + 0.5 * x2
    if binary_y:
        y = (rng.random(n) < expit(idx - 2.0)).astype(float)
    else:
        y = idx + rng.normal(size=n)
    cols = {"y": y, "w": w, "z": z, "x1": x1, "x2": x2}
    cluster = None
    if clusters:
        cols["g"] = np.arange(n) // clusters
        cluster = "g"
    return Dataset(cols, Roles("y", "w", "z", ("x1", "x2"), cluster=cluster))


@pytest.fixture
def iv_data():
    return make_iv_data()


@pytest.fixture
def one_sided_data():
    return make_iv_data(one_sided=True, seed=3)


def record_acceptance(line: str):
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
