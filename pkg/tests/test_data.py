import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drlate.data import (
    CovariateTransform,
    Dataset,
    Roles,
    Term,
    expand_covariates,
    load_dataset,
    parse_term,
    save_dataset,
)
from drlate.errors import DomainError, ParseError, RoleError, TransformError

ROLES = Roles("y", "w", "z", ("age", "inc"))


def _write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


class TestLoad:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 50
        cols = {
            "y": rng.normal(size=n) * 1e5,
            "w": rng.integers(0, 2, n).astype(float),
            "z": np.r_[0.0, 1.0, rng.integers(0, 2, n - 2)],
            "age": rng.uniform(20, 60, n),
            "inc": np.exp(rng.normal(10, 1, n)),
        }
        d = Dataset(cols, ROLES)
        path = tmp_path / "out.csv"
        save_dataset(d, path)
        back = load_dataset(path, ROLES)
        assert back.equals(d)
        save_dataset(back, tmp_path / "again.csv")
        assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()

    def test_missing_value_names_column_and_row(self, tmp_path):
        p = _write(tmp_path, "y,w,z,age,inc\n1,0,1,30,5\n2,1,,40,6\n")
        with pytest.raises(ParseError, match=r"'z', row 2"):
            load_dataset(p, ROLES)

    def test_nonbinary_instrument(self, tmp_path):
        p = _write(tmp_path, "y,w,z,age,inc\n1,0,1,30,5\n2,1,2,40,6\n")
        with pytest.raises(DomainError, match="binary"):
            load_dataset(p, ROLES)

    def test_domain_error_is_role_error(self):
        assert issubclass(DomainError, RoleError)

    def test_missing_role_column(self, tmp_path):
        p = _write(tmp_path, "y,w,z,age\n1,0,1,30\n2,1,0,40\n")
        with pytest.raises(RoleError, match="inc"):
            load_dataset(p, ROLES)

    def test_single_arm_instrument(self, tmp_path):
        p = _write(tmp_path, "y,w,z,age,inc\n1,0,1,30,5\n2,1,1,40,6\n")
        with pytest.raises(RoleError, match="both arms"):
            load_dataset(p, ROLES)

    def test_text_columns_outside_roles_are_dropped(self, tmp_path):
        p = _write(tmp_path, "y,w,z,age,inc,name\n1,0,1,30,5,a\n2,1,0,40,6,b\n")
        d = load_dataset(p, ROLES)
        assert "name" not in d.columns
        npt.assert_array_equal(d.z, [1.0, 0.0])

    def test_arrays_are_read_only(self, iv_data):
        with pytest.raises(ValueError):
            iv_data.y[0] = 1.0


class TestTransform:
    @pytest.mark.parametrize(
        "text, term",
        [
            ("age", Term("age")),
            ("age^2", Term("age", 2)),
            ("(age-25)^2", Term("age", 2, 25.0)),
            ("age-25", Term("age", 1, 25.0)),
            ("inc:c", Term("inc", 1, 0.0, True)),
        ],
    )
    def test_parse(self, text, term):
        assert parse_term(text) == term

    def test_bad_term(self):
        with pytest.raises(TransformError):
            parse_term("log(age)")

    def test_unknown_column(self, iv_data):
        with pytest.raises(TransformError, match="nope"):
            expand_covariates(iv_data, CovariateTransform.parse("nope"))

    def test_expand_layout(self):
        d = Dataset({"y": [1.0, 2, 3], "w": [0.0, 1, 1], "z": [0.0, 1, 1], "age": [25.0, 30, 35]},
                    Roles("y", "w", "z", ("age",)))
        X = expand_covariates(d, CovariateTransform.parse("age,(age-25)^2,age:c"))
        npt.assert_allclose(X, [[1, 25, 0, -5], [1, 30, 25, 0], [1, 35, 100, 5]])

    def test_without_and_labels(self):
        t = CovariateTransform.parse("income,age,age^2")
        assert t.labels == ["const", "income", "age", "age^2"]
        assert str(t.without("age^2")) == "income,age"
        assert str(CovariateTransform()) == "1"

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from(["x", "x^2", "(x-3)^2", "x:c", "v", "v^3"]), unique=True, max_size=5))
    def test_expansion_shape_and_intercept(self, terms):
        rng = np.random.default_rng(len(terms))
        d = Dataset({"y": rng.normal(size=8), "w": np.r_[0.0, 1, 0, 1, 0, 1, 0, 1],
                     "z": np.r_[1.0, 0, 0, 1, 1, 0, 1, 0], "x": rng.normal(size=8), "v": rng.normal(size=8)},
                    Roles("y", "w", "z"))
        t = CovariateTransform.parse(terms)
        X = expand_covariates(d, t)
        assert X.shape == (8, 1 + len(terms))
        npt.assert_array_equal(X[:, 0], 1.0)
