import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qcalib.calibration import (
    CalibrationBatch,
    LambdaPolicy,
    RidgeCalibrator,
    calibrate_layer,
    calibrate_model,
    capture,
    select_lambda,
)
from qcalib.errors import NumericalError
from qcalib.generators import correlated_input_map, heavy_tailed_weights, illcond_problem
from qcalib.linalg import ridge_solve, svd
from qcalib.models import LayerSnapshot, ToyModel
from qcalib.quantizers import QuantSpec
from qcalib.reporting import quantization_mse


def two_layer_model(seed=0):
    rng = np.random.default_rng(seed)
    l0 = LayerSnapshot("a", rng.normal(0, 0.3, (12, 16)), rng.normal(0, 0.1, 12))
    l1 = LayerSnapshot("b", rng.normal(0, 0.3, (8, 12)), rng.normal(0, 0.1, 8))
    return ToyModel((l0, l1), ("relu", "none"))


class TestSelectLambda:
    def test_ill_conditioned_uses_smallest_nonzero(self):
        lam, why = select_lambda([10.0, 1.0, 0.5, 0.05], LambdaPolicy(factor=5.0))
        assert lam == pytest.approx(0.25)
        assert why == "ill_conditioned"

    def test_rank_deficient_walks_up_the_spectrum(self):
        lam, why = select_lambda(
            [1000.0, 10.0, 1.0, 0.001], LambdaPolicy(factor=5.0, cond_rankdef=1e3)
        )
        assert lam == pytest.approx(5.0)
        assert why == "rank_deficient"

    def test_well_conditioned_still_selects(self):
        lam, why = select_lambda([2.0, 1.0], LambdaPolicy(factor=5.0))
        assert lam == pytest.approx(5.0)
        assert why == "well_conditioned"

    def test_fixed_mode_overrides_value_keeps_rationale(self):
        lam, why = select_lambda([10.0, 0.05], LambdaPolicy(mode="fixed", value=0.125))
        assert lam == 0.125
        assert why == "ill_conditioned"

    def test_ignores_zero_singular_values(self):
        lam, why = select_lambda([4.0, 2.0, 0.0, 0.0], LambdaPolicy(factor=2.0))
        assert lam == pytest.approx(4.0)
        assert why == "well_conditioned"

    def test_all_zero_rejected(self):
        with pytest.raises(NumericalError, match="zero"):
            select_lambda([0.0, 0.0], LambdaPolicy())

    def test_policy_validation(self):
        with pytest.raises(ValueError, match="factor"):
            LambdaPolicy(factor=7.0)
        with pytest.raises(ValueError, match="value"):
            LambdaPolicy(mode="fixed")
        with pytest.raises(ValueError, match="cond_ill"):
            LambdaPolicy(cond_ill=1e4, cond_rankdef=1e3)


class TestCapture:
    def test_identity_layer_records_inputs(self):
        model = ToyModel((LayerSnapshot("id", np.eye(3), np.zeros(3)),), ("none",))
        x = np.random.default_rng(1).standard_normal((6, 3))
        batch = capture(model, x)["id"]
        assert np.array_equal(batch.x, x)
        assert np.allclose(batch.y, x)

    def test_two_layer_dataflow(self):
        model = two_layer_model()
        x = np.random.default_rng(2).standard_normal((10, 16))
        batches = capture(model, x)
        assert np.allclose(batches["b"].x, np.maximum(batches["a"].y, 0.0))

    def test_recorded_outputs_match_recompute(self):
        model = two_layer_model(seed=3)
        x = np.random.default_rng(3).standard_normal((20, 16))
        for layer in model.layers:
            b = capture(model, x)[layer.name]
            resid = np.linalg.norm(b.y - (b.x @ layer.w.T + layer.bias))
            assert resid <= 1e-5 * max(1.0, np.linalg.norm(b.y))

    def test_batch_validation(self):
        with pytest.raises(ValueError, match="row counts"):
            CalibrationBatch(x=np.ones((3, 2)), y=np.ones((4, 2)))


class TestCalibrateLayer:
    def test_recovers_known_generator(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((80, 12))
        w0 = rng.standard_normal((6, 12))
        layer = LayerSnapshot("l", rng.standard_normal((6, 12)), rng.standard_normal(6))
        batch = CalibrationBatch(x=x, y=x @ w0.T + layer.bias)
        new_layer, report = calibrate_layer(
            layer, batch, LambdaPolicy(mode="fixed", value=1e-10)
        )
        assert np.linalg.norm(new_layer.w - w0) <= 1e-4 * np.linalg.norm(w0)
        assert np.array_equal(new_layer.bias, layer.bias)
        assert report.residual <= 1e-6

    def test_underdetermined_min_norm(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((5, 12))
        w0 = rng.standard_normal((3, 12))
        layer = LayerSnapshot("l", w0, np.zeros(3))
        batch = CalibrationBatch(x=x, y=x @ w0.T)
        new_layer, _ = calibrate_layer(layer, batch, LambdaPolicy(mode="fixed", value=0.0))
        assert np.allclose(x @ new_layer.w.T, batch.y, atol=1e-8)
        assert np.linalg.norm(new_layer.w) <= np.linalg.norm(w0) + 1e-9
        # any other exact solution differs by a null-space term and is no smaller
        null = np.linalg.svd(x, full_matrices=True)[2][5:]
        for _ in range(20):
            alt = new_layer.w + rng.standard_normal((3, null.shape[0])) @ null
            assert np.linalg.norm(new_layer.w) <= np.linalg.norm(alt) + 1e-9

    def test_auto_beats_extreme_lambdas_on_illcond(self):
        prob = illcond_problem(np.random.default_rng(7))
        heldout = {}
        for tag, policy in {
            "auto": LambdaPolicy(),
            "tiny": LambdaPolicy(mode="fixed", value=1e-8),
            "huge": LambdaPolicy(mode="fixed", value=1e3),
        }.items():
            _, report = calibrate_layer(prob.layer, prob.calib, policy, eval_x=prob.eval_x)
            heldout[tag] = report.heldout_residual
        assert heldout["auto"] < heldout["tiny"]
        assert heldout["auto"] < heldout["huge"]

    def test_lambda_zero_guard_on_illcond(self):
        prob = illcond_problem(np.random.default_rng(8))
        with pytest.raises(NumericalError, match="rank-deficient"):
            calibrate_layer(prob.layer, prob.calib, LambdaPolicy(mode="fixed", value=0.0))

    def test_monotone_residual_and_norm_end_to_end(self):
        prob = illcond_problem(np.random.default_rng(9))
        grid = np.geomspace(1e-6, 1e2, 15)
        norms, resids = [], []
        for lam in grid:
            _, rep = calibrate_layer(prob.layer, prob.calib, LambdaPolicy(mode="fixed", value=float(lam)))
            norms.append(rep.w_norm_after)
            resids.append(rep.residual)
        assert all(b <= a + 1e-9 for a, b in zip(norms, norms[1:]))
        assert all(b >= a - 1e-9 for a, b in zip(resids, resids[1:]))

    def test_variance_reduction_on_redundant_activations(self):
        rng = np.random.default_rng(10)
        d = 24
        mix = correlated_input_map(rng, d, 0.02)
        x = rng.standard_normal((600, d)) @ mix.T
        w0 = heavy_tailed_weights(rng, (16, d), bulk_std=0.02, outlier_frac=0.01, outlier_mag=0.5)
        layer = LayerSnapshot("l", w0, np.zeros(16))
        new_layer, _ = calibrate_layer(layer, CalibrationBatch(x=x, y=x @ w0.T))
        assert new_layer.w.std() < w0.std()

    def test_quant_error_crossover_at_auto_lambda(self):
        prob = illcond_problem(np.random.default_rng(11))
        spec = QuantSpec(bits=3, signed=True)
        new_layer, _ = calibrate_layer(prob.layer, prob.calib)
        assert quantization_mse(new_layer.w, spec) < quantization_mse(prob.layer.w, spec)

    def test_shape_validation(self):
        layer = LayerSnapshot("l", np.ones((2, 3)), np.zeros(2))
        with pytest.raises(ValueError, match="input features"):
            calibrate_layer(layer, CalibrationBatch(x=np.ones((4, 5)), y=np.ones((4, 2))))


class TestCalibrateModel:
    def test_single_layer_reduces_to_calibrate_layer(self):
        rng = np.random.default_rng(12)
        layer = LayerSnapshot("only", rng.standard_normal((4, 6)), rng.standard_normal(4))
        model = ToyModel((layer,), ("none",))
        x = rng.standard_normal((30, 6))
        new_model, reports = calibrate_model(model, x)
        direct, direct_report = calibrate_layer(layer, capture(model, x)["only"])
        assert np.array_equal(new_model.layers[0].w, direct.w)
        assert reports[0].to_dict() == direct_report.to_dict()

    def test_reports_present_and_finite(self):
        model = two_layer_model(seed=13)
        x = np.random.default_rng(13).standard_normal((50, 16))
        _, reports = calibrate_model(model, x, eval_inputs=x[:10])
        assert [r.layer for r in reports] == ["a", "b"]
        for r in reports:
            for value in r.to_dict().values():
                if isinstance(value, float):
                    assert np.isfinite(value)

    def test_forward_within_five_percent_on_well_conditioned_model(self):
        # lambda = factor * sigma_min shrinks relative to sigma_min^2, so
        # well-scaled activations make the auto selection near-lossless
        model = two_layer_model(seed=14)
        x = 10.0 * np.random.default_rng(14).standard_normal((400, 16))
        calibrated, reports = calibrate_model(model, x)
        assert all(r.rationale == "well_conditioned" for r in reports)
        rel = np.linalg.norm(calibrated.forward(x) - model.forward(x))
        assert rel <= 0.05 * np.linalg.norm(model.forward(x))

    def test_deterministic_reports(self):
        model = two_layer_model(seed=15)
        x = np.random.default_rng(15).standard_normal((40, 16))
        _, r1 = calibrate_model(model, x)
        _, r2 = calibrate_model(model, x)
        assert json.dumps([r.to_dict() for r in r1], sort_keys=True) == json.dumps(
            [r.to_dict() for r in r2], sort_keys=True
        )


class TestRidgeCalibrator:
    def test_matches_ridge_solve(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((50, 8))
        y = rng.standard_normal((50, 3))
        est = RidgeCalibrator(lam=0.5).fit(x, y)
        assert np.allclose(est.coef_, ridge_solve(x, y, 0.5))
        assert np.allclose(est.predict(x), x @ est.coef_.T)

    def test_auto_lambda_matches_select_lambda(self):
        prob = illcond_problem(np.random.default_rng(17))
        est = RidgeCalibrator().fit(prob.calib.x, prob.calib.y)
        lam, why = select_lambda(svd(prob.calib.x).s, LambdaPolicy())
        assert est.lambda_ == pytest.approx(lam)
        assert est.rationale_ == why

    def test_one_dim_targets(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((30, 5))
        y = rng.standard_normal(30)
        est = RidgeCalibrator(lam=0.1).fit(x, y)
        assert est.coef_.shape == (1, 5)

    def test_sklearn_protocol(self):
        est = RidgeCalibrator(lam=0.25, factor=4.0)
        params = est.get_params()
        assert params["lam"] == 0.25 and params["factor"] == 4.0
        assert clone(est).get_params() == params
        with pytest.raises(NotFittedError):
            RidgeCalibrator().predict(np.ones((2, 2)))

    def test_zero_lambda_guard(self):
        prob = illcond_problem(np.random.default_rng(19))
        with pytest.raises(NumericalError, match="rank-deficient"):
            RidgeCalibrator(lam=0.0).fit(prob.calib.x, prob.calib.y)
