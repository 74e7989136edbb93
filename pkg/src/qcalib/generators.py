"""Seeded generators for the synthetic fixtures used by tests, reports, and the CLI.

Three families:
  * heavy-tailed weight matrices (narrow Gaussian bulk plus rare large outliers),
  * ill-conditioned calibration problems with an exactly prescribed singular
    spectrum and a low-precision-style recording error on the outputs,
  * small teacher models for the training simulator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationBatch
from .models import LayerSnapshot, ToyModel


def heavy_tailed_weights(
    rng: np.random.Generator,
    shape: tuple[int, int],
    bulk_std: float = 0.02,
    outlier_frac: float = 0.005,
    outlier_mag: float = 0.5,
) -> np.ndarray:
    """Gaussian bulk with a fraction of entries replaced by +-outlier_mag spikes."""
    w = rng.normal(0.0, bulk_std, size=shape)
    n = w.size
    n_out = max(1, int(round(outlier_frac * n))) if outlier_frac > 0 else 0
    if n_out:
        idx = rng.choice(n, size=n_out, replace=False)
        signs = rng.choice([-1.0, 1.0], size=n_out)
        w.ravel()[idx] = signs * outlier_mag
    return w


def random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Matrix with orthonormal columns (rows >= cols) from a QR factorization."""
    if rows < cols:
        raise ValueError(f"need rows >= cols, got {rows} x {cols}")
    g = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(g)
    # fix the sign convention so the factorization is unambiguous
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class IllConditionedProblem:
    """One layer plus calibration/eval data with a prescribed activation spectrum."""

    layer: LayerSnapshot
    calib: CalibrationBatch
    eval_x: np.ndarray
    singular_values: np.ndarray


def illcond_problem(
    rng: np.random.Generator,
    d: int = 32,
    n_calib: int = 50,
    n_eval: int = 10,
    sigma_lo: float = 1e-4,
    sigma_hi: float = 1.0,
    top_k: int = 8,
    coef_std: float = 0.04,
    outlier_frac: float = 0.003,
    outlier_mag: float = 0.3,
    record_noise: float = 5e-3,
) -> IllConditionedProblem:
    """Build a calibration problem whose activation matrix has log-spaced singular values.

    The layer's weights live mostly in the span of the top_k activation
    directions (as trained weights do) and carry a few large outlier entries.
    Recorded outputs include relative Gaussian noise `record_noise`, emulating
    capture in a low-precision format; the held-out batch is isotropic, i.e.
    deliberately more diverse than the narrow calibration batch.
    """
    if not 1 <= top_k <= d:
        raise ValueError(f"top_k must lie in [1, {d}], got {top_k}")
    u = random_orthonormal(rng, n_calib, d)
    v = random_orthonormal(rng, d, d)
    spectrum = np.geomspace(sigma_hi, sigma_lo, d)
    x = (u * spectrum) @ v.T

    coef = rng.normal(0.0, coef_std, size=(d, top_k))
    w0 = coef @ v[:, :top_k].T
    n_out = max(1, int(round(outlier_frac * w0.size)))
    idx = rng.choice(w0.size, size=n_out, replace=False)
    w0.ravel()[idx] = rng.choice([-1.0, 1.0], size=n_out) * outlier_mag
    layer = LayerSnapshot(name="layer0", w=w0, bias=np.zeros(d))

    y = x @ w0.T
    if record_noise > 0:
        rms = float(np.sqrt(np.mean(y * y)))
        y = y + rng.normal(0.0, record_noise * rms, size=y.shape)
    eval_x = rng.standard_normal((n_eval, d))
    return IllConditionedProblem(
        layer=layer,
        calib=CalibrationBatch(x=x, y=y),
        eval_x=eval_x,
        singular_values=spectrum,
    )


def toy_teacher(
    rng: np.random.Generator,
    dims: tuple[int, ...] = (16, 32, 8),
    activations: tuple[str, ...] | None = None,
    bulk_std: float = 1.2,
    outlier_frac: float = 0.02,
    outlier_mag: float = 8.0,
    outlier_layers: tuple[int, ...] = (0,),
) -> ToyModel:
    """Teacher stack for the training simulator, heavy-tailed in the early layers.

    Weight magnitudes are scaled per layer by 1/sqrt(d_in) so activations stay
    O(1) through the stack; outlier spikes (the heavy tail) go only into the
    layers listed in outlier_layers, where large-magnitude weights tend to
    concentrate in practice.  Pass outlier_layers=() for a plain Gaussian
    teacher.
    """
    if len(dims) < 2:
        raise ValueError("dims must name at least input and output widths")
    n_layers = len(dims) - 1
    if activations is None:
        activations = tuple(
            "relu" if i < n_layers - 1 else "none" for i in range(n_layers)
        )
    layers = []
    for i in range(n_layers):
        d_in, d_out = dims[i], dims[i + 1]
        scale = 1.0 / np.sqrt(d_in)
        if i in outlier_layers:
            w = heavy_tailed_weights(
                rng,
                (d_out, d_in),
                bulk_std=bulk_std * scale,
                outlier_frac=outlier_frac,
                outlier_mag=outlier_mag * scale,
            )
        else:
            w = rng.normal(0.0, bulk_std * scale, size=(d_out, d_in))
        bias = rng.normal(0.0, 0.05, size=d_out)
        layers.append(LayerSnapshot(name=f"layer{i}", w=w, bias=bias))
    return ToyModel(tuple(layers), tuple(activations))


def correlated_input_map(rng: np.random.Generator, d: int, decay: float) -> np.ndarray:
    """Mixing matrix whose columns scale from 1 down to `decay` along random axes.

    Inputs drawn as z @ C.T (z standard normal) then have covariance C @ C.T
    with a geometrically decaying spectrum: a redundant, correlated input
    distribution.  decay=1 keeps the distribution isotropic.
    """
    if not 0 < decay <= 1:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    q = random_orthonormal(rng, d, d)
    return q * np.geomspace(1.0, decay, d)
