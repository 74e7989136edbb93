import numpy as np
import pytest

from qcalib.calibration import CalibrationBatch, LambdaPolicy, select_lambda
from qcalib.generators import heavy_tailed_weights, illcond_problem
from qcalib.linalg import svd
from qcalib.models import LayerSnapshot
from qcalib.quantizers import QuantSpec
from qcalib.reporting import (
    SWEEP_CSV_COLUMNS,
    default_grid,
    distribution_summary,
    lambda_sweep,
    occupancy_compare,
    tensor_digest,
)


def well_conditioned_problem(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((60, 10))
    w0 = rng.standard_normal((6, 10))
    layer = LayerSnapshot("fc", w0, np.zeros(6))
    return layer, CalibrationBatch(x=x, y=x @ w0.T), rng.standard_normal((10, 10))


class TestGrid:
    def test_default_grid(self):
        grid = default_grid()
        assert grid.size == 25
        assert grid[0] == pytest.approx(1e-8)
        assert grid[-1] == pytest.approx(1e3)
        assert np.all(np.diff(grid) > 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            default_grid(lo=1.0, hi=0.1)
        with pytest.raises(ValueError):
            default_grid(num=0)


class TestLambdaSweep:
    def test_well_conditioned_heldout_is_monotone(self):
        layer, batch, eval_x = well_conditioned_problem()
        res = lambda_sweep(layer, batch, eval_x, default_grid())
        assert np.all(np.diff(res.heldout_l2) >= -1e-9)

    def test_illcond_heldout_is_u_shaped(self):
        prob = illcond_problem(np.random.default_rng(7))
        res = lambda_sweep(prob.layer, prob.calib, prob.eval_x, default_grid())
        interior_min = res.heldout_l2.min()
        assert interior_min < res.heldout_l2[0]
        assert interior_min < res.heldout_l2[-1]
        assert 0 < int(np.argmin(res.heldout_l2)) < res.lambdas.size - 1

    def test_quant_mse_crosses_below_baseline(self):
        prob = illcond_problem(np.random.default_rng(7))
        grid = default_grid()
        res = lambda_sweep(prob.layer, prob.calib, prob.eval_x, grid, QuantSpec(3, signed=True))
        below = res.quant_mse < res.baseline_quant_mse
        threshold = next(i for i in range(grid.size) if below[i:].all())
        lam_auto, _ = select_lambda(svd(prob.calib.x).s, LambdaPolicy())
        assert lam_auto >= grid[threshold]

    def test_norm_monotone_and_residual_monotone(self):
        prob = illcond_problem(np.random.default_rng(8))
        res = lambda_sweep(prob.layer, prob.calib, prob.eval_x, default_grid())
        assert np.all(np.diff(res.frob_norm) <= 1e-9)
        assert np.all(np.diff(res.residual) >= -1e-9)

    def test_deterministic_and_digested(self):
        layer, batch, eval_x = well_conditioned_problem(seed=1)
        grid = default_grid(num=7)
        r1 = lambda_sweep(layer, batch, eval_x, grid)
        r2 = lambda_sweep(layer, batch, eval_x, grid)
        assert r1.to_dict() == r2.to_dict()
        assert r1.input_digests["w"] == tensor_digest(layer.w)
        assert set(r1.input_digests) == {"w", "calib_x", "calib_y", "eval_x"}

    def test_csv_rows_match_columns(self):
        layer, batch, eval_x = well_conditioned_problem(seed=2)
        res = lambda_sweep(layer, batch, eval_x, default_grid(num=5))
        rows = res.csv_rows()
        assert len(rows) == 5
        assert all(len(row) == len(SWEEP_CSV_COLUMNS) for row in rows)

    def test_grid_must_increase(self):
        layer, batch, eval_x = well_conditioned_problem(seed=3)
        with pytest.raises(ValueError, match="increasing"):
            lambda_sweep(layer, batch, eval_x, np.array([1.0, 1.0, 2.0]))


class TestDistributionSummary:
    def test_identical_inputs(self):
        x = np.random.default_rng(1).standard_normal(500)
        s = distribution_summary(x, x.copy())
        assert s["before"] == s["after"]

    def test_halved_tensor_halves_std_exactly(self):
        x = np.random.default_rng(2).standard_normal(500)
        s = distribution_summary(x, 0.5 * x)
        assert s["after"]["std"] == 0.5 * s["before"]["std"]

    def test_histograms_share_bins_and_sum_to_counts(self):
        rng = np.random.default_rng(3)
        before, after = rng.standard_normal(400), 0.3 * rng.standard_normal(300)
        s = distribution_summary(before, after)
        assert len(s["bin_edges"]) == 102
        assert sum(s["before"]["histogram"]) == 400
        assert sum(s["after"]["histogram"]) == 300

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            distribution_summary(np.array([]), np.ones(3))

    def test_calibration_narrows_heavy_tailed_weights(self):
        from qcalib.calibration import calibrate_layer
        from qcalib.generators import correlated_input_map

        rng = np.random.default_rng(6)
        d = 24
        mix = correlated_input_map(rng, d, 0.02)
        x = rng.standard_normal((600, d)) @ mix.T
        w0 = heavy_tailed_weights(rng, (16, d), bulk_std=0.02, outlier_frac=0.01, outlier_mag=0.5)
        layer = LayerSnapshot("l", w0, np.zeros(16))
        calibrated, _ = calibrate_layer(layer, CalibrationBatch(x=x, y=x @ w0.T))
        s = distribution_summary(w0, calibrated.w)
        assert s["after"]["std"] < s["before"]["std"]


class TestOccupancyCompare:
    def test_uniform_weights_balanced_on_both_paths(self):
        rng = np.random.default_rng(4)
        w = rng.uniform(-1, 1, 8000)
        # alpha * sigma = sqrt(3) * (1/sqrt(3)) = 1: the clip window matches
        # the support. End levels have truncated catchment (their width depends
        # on zero-point rounding), so near-uniform is asserted on the interior.
        out = occupancy_compare(w, bits=3, alpha=float(np.sqrt(3)))
        total = w.size
        for key in ("minmax_occupancy", "clipped_occupancy"):
            interior = out[key][1:-1]
            assert min(interior) > 0.08 * total
            assert max(interior) < 0.22 * total

    def test_heavy_tailed_underuses_minmax_levels(self):
        w = heavy_tailed_weights(np.random.default_rng(1234), (64, 64))
        out = occupancy_compare(w, bits=3, alpha=3.0)
        starved = sum(c < 0.01 * w.size for c in out["minmax_occupancy"])
        assert starved >= 5
        assert sum(out["minmax_occupancy"]) == w.size
        assert sum(out["clipped_occupancy"]) == w.size

    def test_clipped_mse_below_minmax_mse(self):
        w = heavy_tailed_weights(np.random.default_rng(1234), (64, 64))
        out = occupancy_compare(w, bits=3, alpha=3.0)
        assert out["clipped_mse"] < out["minmax_mse"]
        # the total including clipping loss is also reported, and the clip
        # loss itself dominates it on this distribution
        assert out["clipped_total_mse"] > out["clipped_mse"]
        assert out["clip_loss"] > 0

    def test_digest_matches_input(self):
        w = np.random.default_rng(5).standard_normal(100)
        out = occupancy_compare(w, bits=4)
        assert out["input_digests"]["w"] == tensor_digest(w)
