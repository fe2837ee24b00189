import numpy as np
import numpy.testing as npt
import pytest

from drlate.data import CovariateTransform
from drlate.errors import PreconditionError
from drlate.estimators import EstimatorSpec, Models
from drlate.hausman import FLAVORS, comparison_specs, flavor_test, hausman_dr_test
from conftest import make_iv_data

COV = CovariateTransform.parse("x1,x2")


@pytest.fixture
def models():
    return Models.shared(COV)


class TestHausman:
    def test_self_comparison_is_a_tie(self, iv_data, models):
        s = EstimatorSpec("dr_late", models)
        r = hausman_dr_test(iv_data, s, s, B=20)
        assert r.diff == 0.0 and r.se_diff == 0.0 and r.p_value == 1.0

    def test_antisymmetry(self, iv_data, models):
        a, b = comparison_specs("late_vs_latt", models)
        ab = hausman_dr_test(iv_data, a, b, B=40, seed=3)
        ba = hausman_dr_test(iv_data, b, a, B=40, seed=3)
        assert ab.diff == -ba.diff
        npt.assert_allclose(ab.t_stat, -ba.t_stat)
        npt.assert_allclose(ab.p_value, ba.p_value)

    def test_t_and_p_definitions(self, iv_data, models):
        r = flavor_test(iv_data, "iv_vs_late", models, "joint_gmm")
        npt.assert_allclose(r.t_stat, r.diff / r.se_diff)
        from scipy.stats import norm
        npt.assert_allclose(r.p_value, 2 * (1 - norm.cdf(abs(r.t_stat))))

    @pytest.mark.parametrize("flavor", sorted(FLAVORS))
    def test_joint_gmm_agrees_with_bootstrap(self, flavor, models):
        d = make_iv_data(n=1500, seed=21, one_sided=True)
        g = flavor_test(d, flavor, models, "joint_gmm", known_pi0_zero=True)
        b = flavor_test(d, flavor, models, "bootstrap", known_pi0_zero=True, B=200, seed=1)
        assert g.diff == b.diff
        npt.assert_allclose(g.se_diff, b.se_diff, rtol=0.25)

    def test_one_sided_precondition(self, iv_data, models):
        with pytest.raises(PreconditionError, match="one-sided"):
            flavor_test(iv_data, "latt_vs_att", models)

    def test_override_runs(self, iv_data, models):
        r = flavor_test(iv_data, "latt_vs_att", models, "joint_gmm", override=True)
        assert np.isfinite(r.p_value)

    def test_to_dict(self, one_sided_data, models):
        r = flavor_test(one_sided_data, "latt_vs_att", models, "joint_gmm")
        out = r.to_dict()
        assert out["method_se"] == "joint_gmm" and out["left"]["estimand"] == "LATT"

    def test_unknown_options(self, iv_data, models):
        with pytest.raises(ValueError):
            comparison_specs("ols_vs_iv", models)
        s = EstimatorSpec("ra", models)
        with pytest.raises(ValueError):
            hausman_dr_test(iv_data, s, s, "sandwich")
