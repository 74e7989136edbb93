"""Diagnostic analytics: ridge-strength sweeps, distribution summaries, occupancy reports.

Every report carries content digests of its input tensors so the published
numbers can be recomputed from the saved data.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationBatch
from .linalg import ridge_from_svd, svd
from .models import LayerSnapshot
from .quantizers import (
    QuantSpec,
    apply_clip,
    bin_occupancy,
    dequantize,
    fake_quantize,
    minmax_observe,
    quantize,
    sigma_observe,
)
from .tensor_io import tensor_bytes

SWEEP_CSV_COLUMNS = ("lambda", "heldout_l2", "quant_mse", "frob_norm", "residual")

HISTOGRAM_BINS = 101


def tensor_digest(arr: np.ndarray) -> str:
    """sha256 of the canonical file encoding (float64 inputs hash as their f32 storage)."""
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.int32)):
        arr = arr.astype(np.int32) if np.issubdtype(arr.dtype, np.integer) else arr.astype(np.float32)
    return hashlib.sha256(tensor_bytes(arr)).hexdigest()


def default_grid(lo: float = 1e-8, hi: float = 1e3, num: int = 25) -> np.ndarray:
    """Log-spaced ridge-strength grid used by sweeps."""
    if num < 1:
        raise ValueError("grid needs at least one point")
    if not 0 < lo < hi:
        raise ValueError(f"need 0 < lo < hi, got lo={lo}, hi={hi}")
    return np.geomspace(lo, hi, num)


def quantization_mse(w: np.ndarray, spec: QuantSpec) -> float:
    """Mean squared round-trip error of w under freshly fitted min/max params."""
    w = np.asarray(w, dtype=np.float64)
    err = w - fake_quantize(w, minmax_observe(w, spec))
    return float(np.mean(err * err))


@dataclass
class SweepResult:
    """Per-lambda calibration diagnostics for one layer plus the uncalibrated baseline."""

    layer: str
    lambdas: np.ndarray
    heldout_l2: np.ndarray
    heldout_l2_per_sample: np.ndarray
    quant_mse: np.ndarray
    frob_norm: np.ndarray
    residual: np.ndarray
    baseline_quant_mse: float
    input_digests: dict[str, str]

    def __post_init__(self) -> None:
        lam = np.asarray(self.lambdas, dtype=np.float64)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("lambda grid must be a non-empty vector")
        if (np.diff(lam) <= 0).any():
            raise ValueError("lambda grid must be strictly increasing")
        for label in ("heldout_l2", "heldout_l2_per_sample", "quant_mse", "frob_norm", "residual"):
            col = np.asarray(getattr(self, label), dtype=np.float64)
            if col.shape != lam.shape:
                raise ValueError(f"{label} must match the grid length")
            if not np.isfinite(col).all():
                raise ValueError(f"{label} contains non-finite values")
            setattr(self, label, col)
        self.lambdas = lam

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "baseline_quant_mse": self.baseline_quant_mse,
            "input_digests": self.input_digests,
            "results": [
                {
                    "lambda": float(self.lambdas[i]),
                    "heldout_l2": float(self.heldout_l2[i]),
                    "heldout_l2_per_sample": float(self.heldout_l2_per_sample[i]),
                    "quant_mse": float(self.quant_mse[i]),
                    "frob_norm": float(self.frob_norm[i]),
                    "residual": float(self.residual[i]),
                }
                for i in range(self.lambdas.size)
            ],
        }

    def csv_rows(self) -> list[tuple[float, ...]]:
        return [
            (
                float(self.lambdas[i]),
                float(self.heldout_l2[i]),
                float(self.quant_mse[i]),
                float(self.frob_norm[i]),
                float(self.residual[i]),
            )
            for i in range(self.lambdas.size)
        ]


def lambda_sweep(
    layer: LayerSnapshot,
    calib: CalibrationBatch,
    eval_x,
    grid,
    spec: QuantSpec = QuantSpec(bits=3, signed=True, axis=None),
) -> SweepResult:
    """Evaluate the ridge projection across a grid of regularization strengths.

    Per grid point: the calibrated weights, the held-out output discrepancy
    against the original layer, the min/max quantization error of the
    calibrated weights under `spec`, their Frobenius norm, and the calibration
    residual.  The baseline is the quantization error of the original weights.
    """
    grid = np.asarray(grid, dtype=np.float64)
    eval_x = np.asarray(eval_x, dtype=np.float64)
    if eval_x.ndim != 2 or eval_x.shape[1] != layer.d_in:
        raise ValueError(f"eval_x must be (n, {layer.d_in}), got {eval_x.shape}")
    decomp = svd(calib.x)
    targets = calib.y - layer.bias
    ref_out = eval_x @ layer.w.T
    n_eval = eval_x.shape[0]

    heldout, heldout_ps, qmse, fnorm, resid = [], [], [], [], []
    for lam in grid:
        w_hat = ridge_from_svd(decomp, targets, float(lam))
        delta = eval_x @ w_hat.T - ref_out
        heldout.append(float(np.linalg.norm(delta)))
        heldout_ps.append(float(np.mean(np.linalg.norm(delta, axis=1))))
        qmse.append(quantization_mse(w_hat, spec))
        fnorm.append(float(np.linalg.norm(w_hat)))
        resid.append(float(np.linalg.norm(calib.x @ w_hat.T - targets)))

    return SweepResult(
        layer=layer.name,
        lambdas=grid,
        heldout_l2=np.array(heldout),
        heldout_l2_per_sample=np.array(heldout_ps),
        quant_mse=np.array(qmse),
        frob_norm=np.array(fnorm),
        residual=np.array(resid),
        baseline_quant_mse=quantization_mse(layer.w, spec),
        input_digests={
            "w": tensor_digest(layer.w),
            "calib_x": tensor_digest(calib.x),
            "calib_y": tensor_digest(calib.y),
            "eval_x": tensor_digest(eval_x),
        },
    )


def _summary(values: np.ndarray, edges: np.ndarray) -> dict:
    counts, _ = np.histogram(values, bins=edges)
    return {
        "mean": float(values.mean()),
        "std": float(values.std()),
        "min": float(values.min()),
        "max": float(values.max()),
        "histogram": counts.tolist(),
    }


def distribution_summary(before, after, bins: int = HISTOGRAM_BINS) -> dict:
    """Summary statistics plus identically binned histograms for a tensor pair.

    Both histograms share `bins` fixed bins over the pooled min/max so the two
    distributions are directly comparable.
    """
    before = np.asarray(before, dtype=np.float64).ravel()
    after = np.asarray(after, dtype=np.float64).ravel()
    if before.size == 0 or after.size == 0:
        raise ValueError("both tensors must be non-empty")
    lo = min(before.min(), after.min())
    hi = max(before.max(), after.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return {
        "bin_edges": edges.tolist(),
        "before": _summary(before, edges),
        "after": _summary(after, edges),
        "input_digests": {"before": tensor_digest(before), "after": tensor_digest(after)},
    }


def occupancy_compare(w, bits: int, alpha: float = 3.0, signed: bool = True) -> dict:
    """Quantize one tensor through the min/max and variance-clipped paths.

    Reports per-level occupancy for both paths and three error figures per
    path: `*_mse` is the quantization (round-trip) error measured against the
    quantizer's own effective input, i.e. the raw tensor for min/max and the
    clipped tensor for the sigma path; `clipped_total_mse` additionally folds
    the clipping loss back in by measuring against the raw tensor, and
    `clip_loss` is that clipping loss alone.
    """
    w = np.asarray(w, dtype=np.float64)
    spec = QuantSpec(bits=bits, signed=signed, axis=None)

    mm_params = minmax_observe(w, spec)
    mm_codes = quantize(w, mm_params)
    mm_fq = dequantize(mm_codes, mm_params)
    mm_err = w - mm_fq

    clip_stats, sg_params = sigma_observe(w, spec, alpha)
    lo, hi = clip_stats.window()
    w_clipped = apply_clip(w, sg_params, clip_stats)
    sg_codes = quantize(w_clipped, sg_params)
    sg_fq = dequantize(sg_codes, sg_params)
    sg_err = w_clipped - sg_fq
    sg_total = w - sg_fq
    clip_loss = w - w_clipped

    return {
        "bits": bits,
        "alpha": alpha,
        "levels": int(2**bits),
        "minmax_occupancy": bin_occupancy(mm_codes, spec).tolist(),
        "clipped_occupancy": bin_occupancy(sg_codes, spec).tolist(),
        "minmax_mse": float(np.mean(mm_err * mm_err)),
        "clipped_mse": float(np.mean(sg_err * sg_err)),
        "clipped_total_mse": float(np.mean(sg_total * sg_total)),
        "clip_loss": float(np.mean(clip_loss * clip_loss)),
        "minmax_scale": float(mm_params.scale[0]),
        "clipped_scale": float(sg_params.scale[0]),
        "clip_window": [float(lo[0]), float(hi[0])],
        "input_digests": {"w": tensor_digest(w)},
    }
