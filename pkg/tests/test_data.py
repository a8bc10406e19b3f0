import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from minnbart.data import (
    DegenerateScaleError,
    DomainError,
    InsufficientDataError,
    LengthError,
    TimeSeriesPanel,
    apply_transform,
    build_design,
    destandardize,
    lag_vector,
    read_panel_csv,
    read_transform_codes,
    standardize,
    transform_panel,
    write_panel_csv,
)


def panel_of(values, names=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[1]
    names = names or [f"v{i}" for i in range(n)]
    return TimeSeriesPanel(names, values, (1,) * n, [f"d{t}" for t in range(values.shape[0])])


class TestApplyTransform:
    def test_identity(self):
        np.testing.assert_array_equal(apply_transform([1, 2, 3], 1), [1, 2, 3])

    def test_log_growth(self):
        out = apply_transform([1.0, math.exp(0.01)], 3)
        np.testing.assert_allclose(out, [1.0], rtol=1e-12)

    def test_percentage_change(self):
        np.testing.assert_allclose(apply_transform([100, 102], 4), [2.0], rtol=1e-12)

    def test_year_on_year(self):
        x = np.exp(np.arange(8) * 0.02)
        np.testing.assert_allclose(apply_transform(x, 2), np.full(4, 8.0), rtol=1e-10)

    @pytest.mark.parametrize("code", [2, 3])
    def test_nonpositive_rejected(self, code):
        with pytest.raises(DomainError):
            apply_transform([1.0, 0.0, 2.0, 3.0, 4.0, 5.0], code)

    @pytest.mark.parametrize("code,length", [(2, 4), (3, 1), (4, 1)])
    def test_too_short(self, code, length):
        with pytest.raises(LengthError):
            apply_transform(np.ones(length), code)


class TestBuildDesign:
    def test_shapes(self):
        d = build_design(panel_of(np.arange(10.0).reshape(5, 2)), 2)
        assert d.Y.shape == (3, 2) and d.X.shape == (3, 4)

    def test_lag_shift(self):
        d = build_design(panel_of([1.0, 2.0, 3.0]), 1)
        np.testing.assert_array_equal(d.Y[:, 0], [2, 3])
        np.testing.assert_array_equal(d.X[:, 0], [1, 2])

    def test_thirteen_lags(self):
        d = build_design(panel_of(np.random.default_rng(0).standard_normal((40, 2))), 13)
        assert d.k == 26

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            build_design(panel_of([1.0, 2.0]), 2)

    @given(T=st.integers(5, 20), n=st.integers(1, 4), p=st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_column_map(self, T, n, p):
        if T <= p:
            return
        values = np.random.default_rng(T * 7 + n).standard_normal((T, n))
        d = build_design(panel_of(values), p)
        for q in range(n * p):
            for t in range(T - p):
                assert d.X[t, q] == values[t + p - d.lag_of_column[q], d.variable_of_column[q]]

    def test_lag_vector_matches_design_row(self):
        values = np.random.default_rng(1).standard_normal((12, 3))
        d = build_design(panel_of(values), 4)
        # row t of X is the lag vector of the history ending just before Y's row t
        np.testing.assert_array_equal(lag_vector(values[2:6], 4), d.X[2])

    def test_deterministic(self):
        raw = panel_of(np.exp(np.random.default_rng(2).standard_normal((30, 2)) * 0.1 + 3))
        a = build_design(transform_panel(raw, (3, 2)), 3)
        b = build_design(transform_panel(raw, (3, 2)), 3)
        assert a.X.tobytes() == b.X.tobytes() and a.Y.tobytes() == b.Y.tobytes()


class TestStandardize:
    def test_two_points(self):
        # unit sample sd with denominator T - 1
        out = standardize(panel_of([0.0, 2.0]))
        np.testing.assert_allclose(out.values[:, 0], [-1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-12)
        np.testing.assert_allclose(out.scaling[:, 0], [1.0, math.sqrt(2)], rtol=1e-12)

    def test_moments(self):
        out = standardize(panel_of(np.random.default_rng(3).standard_normal((50, 3)) * 4 + 2))
        np.testing.assert_allclose(out.values.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(out.values.std(axis=0, ddof=1), 1, rtol=1e-12)

    def test_idempotent(self):
        once = standardize(panel_of(np.random.default_rng(4).standard_normal((30, 2))))
        twice = standardize(once)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-12)

    def test_constant(self):
        with pytest.raises(DegenerateScaleError):
            standardize(panel_of(np.ones(5)))

    @given(arrays(float, (12, 2), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, values):
        if np.any(values.std(axis=0) < 1e-3):
            return
        z = standardize(panel_of(values))
        back = destandardize(z.values, z.scaling)
        np.testing.assert_allclose(back, values, rtol=1e-10, atol=1e-10 * np.abs(values).max())
        again = (back - z.scaling[0]) / z.scaling[1]
        np.testing.assert_allclose(again, z.values, rtol=1e-12, atol=1e-12)


class TestCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        values = np.exp(rng.standard_normal((12, 2)) * 0.1 + 2)
        path = tmp_path / "raw.csv"
        write_panel_csv(panel_of(values, ["GDP", "CPI"]), path)
        (tmp_path / "codes.csv").write_text("mnemonic,code\nGDP,3\nCPI,2\n")
        codes = read_transform_codes(tmp_path / "codes.csv")
        assert codes == {"GDP": 3, "CPI": 2}
        panel = read_panel_csv(path, codes)
        assert panel.transform_codes == (3, 2)
        assert panel.T == 8
        np.testing.assert_allclose(panel.values[:, 0], 100 * np.diff(np.log(values[:, 0]))[3:], rtol=1e-12)
        np.testing.assert_allclose(panel.values[:, 1], 100 * (np.log(values[4:, 1]) - np.log(values[:-4, 1])),
                                   rtol=1e-12)

    def test_missing_values(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,a\n2000Q1,1.0\n2000Q2,\n")
        with pytest.raises(ValueError):
            read_panel_csv(path)
