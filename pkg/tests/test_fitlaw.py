import math

import numpy as np
import pytest

from lawline.core import ConfigId, LossUnit, UnitMismatchError, MissingDataError
from lawline.fitlaw import (
    ComputeToLossLaw,
    DegenerateFitError,
    FallbackRequired,
    LossToLossLaw,
    _c2l_jacobian,
    _c2l_model,
    _l2l_model_factory,
    estimate_irreducible_fallback,
    fit_compute_to_loss,
    fit_loss_to_loss,
    fit_two_stage,
    irreducible_law,
    law_from_dict,
    predict_y,
    r_squared,
)
from lawline.ingest import group_by_config, load_records
from lawline.nlls import UnderdeterminedError, finite_difference_jacobian
from lawline.synth import ComputeLawParams, Coupling, WorldSpec, generate

from conftest import BASE, TABLE1, make_record

TRUE = ComputeLawParams(2.0, 400.0, 2000.0, 0.34, 0.28)


def l2l(k=1.0, kappa=1.0, e_x=0.0, e_y=0.0, **kw):
    return LossToLossLaw("x", "y", BASE, k, kappa, e_x, e_y, **kw)


def _l2l_records(k, kappa, e_x, e_y, n=400, noise=0.0, seed=0, gap=0.05):
    rng = np.random.default_rng(seed)
    lx = np.linspace(e_x + gap, e_x + 3.0, n)
    ly = e_y + k * (lx - e_x) ** kappa
    lx = lx + noise * rng.standard_normal(n)
    ly = ly + noise * rng.standard_normal(n)
    return [make_record({"x": float(a), "y": float(b)}, n=i + 1) for i, (a, b) in enumerate(zip(lx, ly))]


class TestComputeToLoss:
    def test_recovery_on_the_stated_grid(self):
        # 200 noiseless records: 10 N values x 20 D values from 6e7..4e8 x 1e8..8e9
        n_values = np.geomspace(6e7, 4e8, 10).round().astype(int)
        d_values = np.geomspace(1e8, 8e9, 20).round().astype(int)
        world = WorldSpec(BASE, {"val": TRUE}, n_values=tuple(n_values), d_values=tuple(d_values))
        rs = generate(world, 0)
        assert len(rs) == 200
        law = fit_compute_to_loss(rs.records, "val")
        got = [law.e_irreducible, law.a_coef, law.b_coef, law.alpha, law.beta]
        assert got == pytest.approx([2.0, 400.0, 2000.0, 0.34, 0.28], rel=1e-3)
        assert not law.fallback_used
        assert law.sse <= 1e-10 * 200

    def test_fitted_curve_decreasing_in_compute(self, reference_group):
        law = fit_compute_to_loss(reference_group, "train")
        n = np.geomspace(1e7, 1e10, 50)
        d = 20 * n
        pred = law.predict(n, d)
        assert np.all(np.diff(pred) < 0)
        assert np.all(pred > law.e_irreducible)

    def test_constant_loss_rejected(self):
        records = [make_record({"x": 3.0}, n=n, d=d) for n in (1e7, 1e8, 1e9) for d in (1e9, 1e10)]
        with pytest.raises(DegenerateFitError):
            fit_compute_to_loss(records, "x")

    def test_too_few_points(self):
        records = [make_record({"x": 3.0 + i}, n=10 + i, d=10 + 2 * i) for i in range(5)]
        with pytest.raises(UnderdeterminedError):
            fit_compute_to_loss(records, "x")

    def test_single_n_requires_fallback(self):
        records = [make_record({"x": 3.0 + 1 / d}, n=100, d=d) for d in range(1, 10)]
        with pytest.raises(FallbackRequired):
            fit_compute_to_loss(records, "x")
        law = irreducible_law(records, "x")
        assert law.fallback_used
        assert law.e_irreducible == min(r.loss("x") for r in records)

    def test_mixed_units_rejected(self):
        records = [make_record({"x": 3.0 + i}, n=10 + i, d=10 + i) for i in range(4)]
        records += [make_record({"x": 3.0 + i}, n=20 + i, d=30 + i, unit="bpb") for i in range(4)]
        with pytest.raises(UnitMismatchError):
            fit_compute_to_loss(records, "x")

    def test_jacobian_matches_central_differences(self):
        rng = np.random.default_rng(7)
        x = np.stack([np.log(rng.uniform(5e7, 5e8, 30)), np.log(rng.uniform(1e3, 1e10, 30))])
        for _ in range(10):
            theta = np.array(
                [rng.uniform(0, 2), rng.uniform(2, 10), rng.uniform(2, 10), rng.uniform(0.1, 1), rng.uniform(0.1, 1)]
            )
            fd = finite_difference_jacobian(_c2l_model, theta, x)
            an = _c2l_jacobian(theta, x)
            # columns far below the E column (which is 1) sit under the difference-quotient noise
            scale = np.maximum(np.abs(an).max(axis=0), 1e-3)
            assert np.all(np.abs(fd - an).max(axis=0) <= 1e-5 * scale)

    def test_serialization_roundtrip(self, reference_group):
        law = fit_compute_to_loss(reference_group, "train")
        again = law_from_dict(law.to_dict())
        assert isinstance(again, ComputeToLossLaw)
        assert again == law


class TestFallback:
    def test_minimum(self):
        records = [make_record({"x": v}) for v in (3.2, 2.9, 3.0)]
        assert estimate_irreducible_fallback(records, "x") == 2.9

    def test_single(self):
        assert estimate_irreducible_fallback([make_record({"x": 4.4})], "x") == 4.4

    def test_table1_c4_column(self):
        groups = group_by_config(load_records(TABLE1))
        fw_edu = [g for g in groups if g.config.pretrain_data == "FW-Edu"]
        assert sorted(r.loss("C4") for g in fw_edu for r in g.records) == [3.66, 3.66, 3.74, 3.74]
        # one group per architecture; each holds a 3.66 and a 3.74 row
        assert [estimate_irreducible_fallback(g, "C4") for g in fw_edu] == [3.66, 3.66]

    def test_absent_dataset(self):
        with pytest.raises(MissingDataError):
            estimate_irreducible_fallback([make_record({"x": 1.0})], "y")


class TestLossToLoss:
    def test_identity_line(self):
        records = [make_record({"x": v, "y": v}) for v in (0.5, 1.0, 1.5, 2.0, 3.0)]
        law = fit_loss_to_loss(records, "x", "y", 0.0, 0.0)
        assert law.k_coef == pytest.approx(1.0, rel=1e-9)
        assert law.kappa == pytest.approx(1.0, rel=1e-9)
        assert law.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_noiseless_recovery(self):
        law = fit_loss_to_loss(_l2l_records(0.8, 1.3, 1.5, 2.0), "x", "y", 1.5, 2.0)
        assert [law.k_coef, law.kappa] == pytest.approx([0.8, 1.3], rel=1e-4)
        assert law.r_squared >= 0.9999
        assert law.n_points == 400
        assert (law.e_x, law.e_y) == (1.5, 2.0)

    @pytest.mark.slow
    def test_noisy_recovery_median_over_seeds(self):
        # oracle: Monte-Carlo over the generator, floors supplied exactly
        errs_k, errs_kappa = [], []
        for seed in range(20):
            records = _l2l_records(0.8, 1.3, 1.5, 2.0, n=500, noise=0.01, seed=seed, gap=0.2)
            law = fit_loss_to_loss(records, "x", "y", 1.5, 2.0)
            errs_k.append(abs(law.k_coef / 0.8 - 1))
            errs_kappa.append(abs(law.kappa / 1.3 - 1))
        assert np.median(errs_k) <= 0.05
        assert np.median(errs_kappa) <= 0.05

    def test_too_few_pairs(self):
        records = [make_record({"x": 1.0, "y": 1.0}), make_record({"x": 2.0, "y": 2.0}), make_record({"x": 3.0})]
        with pytest.raises(UnderdeterminedError):
            fit_loss_to_loss(records, "x", "y", 0.0, 0.0)

    def test_floor_above_data_rejected(self):
        records = _l2l_records(1.0, 1.0, 1.0, 1.0, n=10)
        with pytest.raises(ValueError):
            fit_loss_to_loss(records, "x", "y", 2.0, 1.0)

    def test_points_at_floor_are_clamped(self):
        records = _l2l_records(0.8, 1.3, 1.5, 2.0, n=50) + [make_record({"x": 1.5, "y": 2.0}, n=999)]
        law = fit_loss_to_loss(records, "x", "y", 1.5 + 5e-7, 2.0)
        assert math.isfinite(law.k_coef) and law.kappa > 0

    def test_floors_are_not_modified(self):
        records = _l2l_records(0.8, 1.3, 1.5, 2.0, n=50, noise=0.02, gap=0.2)
        law = fit_loss_to_loss(records, "x", "y", 1.4, 1.9)
        assert (law.e_x, law.e_y) == (1.4, 1.9)

    def test_deterministic(self):
        records = _l2l_records(0.8, 1.3, 1.5, 2.0, n=60, noise=0.02, gap=0.2)
        a = fit_loss_to_loss(records, "x", "y", 1.45, 1.95)
        b = fit_loss_to_loss(records, "x", "y", 1.45, 1.95)
        assert (a.k_coef, a.kappa) == (b.k_coef, b.kappa)

    def test_mixed_units_rejected(self):
        records = [make_record({"x": 1.0 + i, "y": 1.0 + i}) for i in range(3)]
        records += [make_record({"x": 1.0 + i, "y": 1.0 + i}, unit="bpb") for i in range(3)]
        with pytest.raises(UnitMismatchError):
            fit_loss_to_loss(records, "x", "y", 0.0, 0.0)

    def test_jacobian_matches_central_differences(self):
        model, jac = _l2l_model_factory(1.5, 2.0)
        lx = np.linspace(1.6, 4.0, 25)
        for theta in ([0.1, 0.7], [-1.0, 1.3], [2.0, 3.0]):
            theta = np.array(theta)
            assert finite_difference_jacobian(model, theta, lx) == pytest.approx(jac(theta, lx), rel=1e-5)


class TestRSquared:
    def test_perfect(self):
        assert r_squared(l2l(), [(1, 1), (2, 2), (3, 3)]) == 1.0

    def test_mean_predictor(self):
        # flat law at the mean of y: kappa tiny makes K*(x)^kappa ~ K, so build it directly
        law = l2l(k=1e-300, kappa=1.0, e_y=2.0)
        assert r_squared(law, [(1, 1), (2, 2), (3, 3)]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        # SS_res = 0.01 + 0.01; SS_tot = 4 + 0.01 + 3.61 = 7.62 about the mean 4.0
        pts = [(1, 2), (2, 4.1), (3, 5.9)]
        ly = np.array([2, 4.1, 5.9])
        ss_tot = float(((ly - ly.mean()) ** 2).sum())
        assert ss_tot == pytest.approx(7.62, rel=1e-12)
        assert r_squared(l2l(k=2.0), pts) == pytest.approx(1 - 0.02 / ss_tot, rel=1e-12)
        assert f"{r_squared(l2l(k=2.0), pts):.6f}".startswith("0.99737")

    def test_constant_y(self):
        with pytest.raises(ValueError):
            r_squared(l2l(), [(1, 2), (2, 2)])


class TestPredictY:
    def test_identity(self):
        assert predict_y(l2l(), 1.5) == 1.5

    @pytest.mark.parametrize("law", [l2l(0.8, 1.3, 1.5, 2.0), l2l(3.0, 0.5, 0.2, 0.1)])
    def test_anchor(self, law):
        assert predict_y(law, law.e_x) == law.e_y

    def test_hand_value(self):
        assert predict_y(l2l(0.8, 1.3, 1.5, 2.0), 2.5) == pytest.approx(2.8, rel=1e-15)

    def test_clamped_below_floor(self):
        law = l2l(0.8, 1.3, 1.5, 2.0)
        assert predict_y(law, 0.3) == 2.0

    def test_monotone(self):
        law = l2l(0.8, 1.3, 1.5, 2.0)
        xs = np.linspace(0, 5, 1001)
        ys = predict_y(law, xs)
        assert np.all(np.diff(ys) >= 0)
        assert np.all(np.diff(ys[xs > 1.5]) > 0)


class TestTwoStage:
    def test_noiseless_reference_world(self, reference_group):
        fit = fit_two_stage(reference_group, "train", "test")
        x = fit.x_law
        assert [x.e_irreducible, x.a_coef, x.b_coef, x.alpha, x.beta] == pytest.approx(
            [2.0, 400.0, 2000.0, 0.34, 0.28], rel=1e-3
        )
        assert fit.y_law.e_irreducible == pytest.approx(1.8, rel=1e-3)
        assert [fit.l2l.k_coef, fit.l2l.kappa] == pytest.approx([0.8, 1.3], rel=1e-3)
        assert fit.l2l.r_squared >= 0.9999
        assert fit.l2l.e_x == x.e_irreducible and fit.l2l.e_y == fit.y_law.e_irreducible

    def test_serialization_roundtrip(self, reference_group):
        law = fit_two_stage(reference_group, "train", "test").l2l
        again = law_from_dict(law.to_dict())
        assert (again.k_coef, again.kappa, again.e_x, again.e_y, again.r_squared) == (
            law.k_coef, law.kappa, law.e_x, law.e_y, law.r_squared
        )
