import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lawline.analysis import (
    InterventionMatrix,
    InvalidComparisonError,
    InvalidCompositionError,
    ReportOptions,
    adaptive_simpson,
    area_between,
    build_report,
    forecast_downstream,
    intervention_matrix,
    parallel_map,
    reservoir_indices,
    worker_count,
)
from lawline.core import ConfigId, LossUnit
from lawline.fitlaw import LossToLossLaw, fit_compute_to_loss, fit_two_stage, predict_y
from lawline.ingest import group_by_config

from conftest import BASE

trapezoid = getattr(np, "trapezoid", None) or np.trapz  # renamed in numpy 2.0

OTHER = ConfigId("c4", "mamba", "tiktoken")


def l2l(k=1.0, kappa=1.0, e_x=0.0, e_y=0.0, unit=LossUnit.NATS_PER_TOKEN, x="x", y="y", config=BASE):
    return LossToLossLaw(x, y, config, k, kappa, e_x, e_y, unit=unit)


def trapezoid_area(a, b, lo=0.0, hi=2.0, n=1_000_001):
    # independent oracle: dense trapezoid rule on the clamped curves
    xs = np.linspace(lo, hi, n)
    return float(trapezoid(np.abs(predict_y(a, xs) - predict_y(b, xs)), xs))


laws_st = st.builds(
    l2l,
    k=st.floats(0.1, 3.0),
    kappa=st.floats(0.3, 3.0),
    e_x=st.floats(0.0, 1.5),
    e_y=st.floats(0.0, 1.5),
)


class TestQuadrature:
    def test_polynomial_exact(self):
        assert adaptive_simpson(lambda x: x**3, 0.0, 2.0) == pytest.approx(4.0, rel=1e-14)

    def test_smooth(self):
        assert adaptive_simpson(np.sin, 0.0, np.pi, 1e-12) == pytest.approx(2.0, rel=1e-11)


class TestArea:
    def test_identical_laws(self):
        a = l2l(0.8, 1.3, 0.5, 0.6)
        assert area_between(a, a) == 0.0

    def test_constant_offset(self):
        assert area_between(l2l(), l2l(e_y=0.5)) == pytest.approx(1.0, abs=1e-9)

    def test_line_against_parabola(self):
        # |x - x^2| on [0, 2] integrates to 1/6 + 5/6
        a, b = l2l(), l2l(kappa=2.0)
        got = area_between(a, b)
        assert got == pytest.approx(1.0, abs=1e-9)
        assert got == pytest.approx(trapezoid_area(a, b), abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_trapezoid_oracle_with_kinks(self, seed):
        rng = np.random.default_rng(seed)
        a = l2l(rng.uniform(0.3, 2), rng.uniform(0.5, 2.5), rng.uniform(0, 1), rng.uniform(0, 1))
        b = l2l(rng.uniform(0.3, 2), rng.uniform(0.5, 2.5), rng.uniform(0, 1), rng.uniform(0, 1))
        assert area_between(a, b) == pytest.approx(trapezoid_area(a, b), abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(laws_st, laws_st)
    def test_symmetric_and_nonnegative(self, a, b):
        ab, ba = area_between(a, b), area_between(b, a)
        assert ab == ba
        assert ab >= 0

    @settings(max_examples=30, deadline=None)
    @given(laws_st, laws_st, laws_st)
    def test_triangle_inequality(self, a, b, c):
        assert area_between(a, c) <= area_between(a, b) + area_between(b, c) + 1e-7

    @settings(max_examples=30, deadline=None)
    @given(laws_st, st.floats(0.0, 2.0))
    def test_offset_scales_linearly(self, a, delta):
        shifted = l2l(a.k_coef, a.kappa, a.e_x, a.e_y + delta)
        assert area_between(a, shifted, (0.0, 2.0)) == pytest.approx(2.0 * delta, abs=1e-8)

    def test_unit_mismatch(self):
        with pytest.raises(InvalidComparisonError):
            area_between(l2l(), l2l(unit=LossUnit.BITS_PER_BYTE))

    def test_dataset_mismatch(self):
        with pytest.raises(InvalidComparisonError):
            area_between(l2l(), l2l(y="z"))

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            area_between(l2l(), l2l(), (2.0, 1.0))


class TestMatrix:
    @pytest.mark.parametrize("seed", range(10))
    def test_symmetric_zero_diagonal(self, seed):
        rng = np.random.default_rng(100 + seed)
        size = int(rng.integers(2, 6))
        laws = [
            (f"c{i}", l2l(rng.uniform(0.3, 2), rng.uniform(0.5, 2.5), rng.uniform(0, 1.5), rng.uniform(0, 1.5)))
            for i in range(size)
        ]
        m = intervention_matrix(laws).as_array()
        assert np.array_equal(m, m.T)
        assert np.all(np.diag(m) == 0)
        assert np.all(m >= 0)

    def test_labels_in_input_order(self):
        laws = [("zeta", l2l()), ("alpha", l2l(e_y=0.5)), ("mid", l2l(kappa=2.0))]
        m = intervention_matrix(laws)
        assert m.labels == ("zeta", "alpha", "mid")
        assert m.entry("zeta", "alpha") == pytest.approx(1.0, abs=1e-9)

    def test_thread_count_does_not_change_values(self):
        laws = [(f"c{i}", l2l(1.0 + 0.1 * i, 1.0 + 0.2 * i, 0.1 * i, 0.05 * i)) for i in range(5)]
        assert intervention_matrix(laws, threads=1) == intervention_matrix(laws, threads=4)

    def test_roundtrip(self):
        m = intervention_matrix([("a", l2l()), ("b", l2l(kappa=2.0))])
        assert InterventionMatrix.from_dict(m.to_dict()) == m

    def test_needs_two(self):
        with pytest.raises(ValueError):
            intervention_matrix([("a", l2l())])


def test_parallel_map_preserves_order():
    assert parallel_map(lambda v: v * v, list(range(50)), threads=4) == [v * v for v in range(50)]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("LAWLINE_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("LAWLINE_THREADS", "0")
    assert worker_count() == 1


@pytest.fixture(scope="module")
def fitted(reference_group):
    return fit_two_stage(reference_group, "train", "test")


class TestForecast:
    def test_large_compute_reaches_floors(self, fitted):
        out = forecast_downstream(fitted.x_law, fitted.l2l, 10**30, 10**30)
        assert out.predicted_train_loss == pytest.approx(fitted.x_law.e_irreducible, rel=1e-6)
        assert out.predicted_test_loss == pytest.approx(fitted.l2l.e_y, rel=1e-6)

    def test_identity_coupling_returns_train_loss(self, fitted):
        ident = LossToLossLaw("train", "test", BASE, 1.0, 1.0, fitted.x_law.e_irreducible, fitted.x_law.e_irreducible)
        out = forecast_downstream(fitted.x_law, ident, 10**8, 10**9)
        assert out.predicted_test_loss == pytest.approx(out.predicted_train_loss, rel=1e-12)

    def test_monotone_in_compute(self, fitted):
        n = np.geomspace(1e7, 1e11, 20).astype(int)
        tests = [forecast_downstream(fitted.x_law, fitted.l2l, int(v), int(20 * v)).predicted_test_loss for v in n]
        assert np.all(np.diff(tests) < 0)

    def test_composition_matches_direct_fit(self, fitted, reference_group):
        # oracle: the implied compute law for the test set, fitted directly on test losses
        direct = fit_compute_to_loss(reference_group, "test")
        rng = np.random.default_rng(3)
        for n, d in zip(rng.uniform(6e7, 4e8, 20), np.exp(rng.uniform(np.log(1e3), np.log(8e9), 20))):
            out = forecast_downstream(fitted.x_law, fitted.l2l, int(n), int(d))
            assert out.predicted_test_loss == pytest.approx(float(direct.predict(int(n), int(d))), abs=1e-3)

    def test_dataset_mismatch(self, fitted):
        wrong = LossToLossLaw("val", "test", BASE, 1.0, 1.0, 0.0, 0.0)
        with pytest.raises(InvalidCompositionError):
            forecast_downstream(fitted.x_law, wrong, 10**8, 10**9)

    def test_config_mismatch(self, fitted):
        wrong = LossToLossLaw("train", "test", OTHER, 1.0, 1.0, 0.0, 0.0)
        with pytest.raises(InvalidCompositionError):
            forecast_downstream(fitted.x_law, wrong, 10**8, 10**9)


class TestReport:
    def test_empty(self):
        report = build_report([], [])
        d = report.to_dict()
        assert d["curves"] == [] and d["scatter"] == [] and d["matrices"] == []
        assert d["notes"]

    def test_matrix_reproduced_verbatim(self):
        m = intervention_matrix([("a", l2l()), ("b", l2l(e_y=0.25))])
        assert build_report([], [], m).matrices == [m.to_dict()]

    def test_curve_without_records_spans_interval(self):
        report = build_report([], [l2l()], options=ReportOptions(curve_points=11))
        pts = report.curves[0]["points"]
        assert pts[0][0] == 0.0 and pts[-1][0] == 2.0 and len(pts) == 11

    def test_scatter_only_groups(self, reference_records):
        groups = group_by_config(reference_records)
        report = build_report(groups, [])
        assert report.scatter_only == [BASE.label]

    def test_subsample_and_determinism(self, reference_group):
        law = fit_two_stage(reference_group, "train", "test").l2l
        opts = ReportOptions(subsample=25, seed=4)
        a = build_report([reference_group], [law], options=opts).to_dict()
        b = build_report([reference_group], [law], options=opts).to_dict()
        assert a == b
        assert len(a["scatter"][0]["points"]) == 25
        assert a["scatter"][0]["n_total"] == len(reference_group.records)
        curve = a["curves"][0]["points"]
        assert curve[0][0] == law.e_x


@pytest.mark.parametrize("n,k", [(10, 3), (10, 10), (10, 50), (0, 5), (1000, 1)])
def test_reservoir_size(n, k):
    idx = reservoir_indices(n, k, seed=1)
    assert len(idx) == min(k, n)
    assert len(set(idx)) == len(idx) and all(0 <= i < n for i in idx)
    assert idx == reservoir_indices(n, k, seed=1)


def test_reservoir_uniform():
    counts = np.zeros(10)
    for seed in range(2000):
        counts[reservoir_indices(10, 3, seed)] += 1
    assert np.all(np.abs(counts / 2000 - 0.3) < 0.05)
