"""Closed-form weight calibration against recorded layer activations.

A calibration batch is the exact (input, output) pair a layer saw during a
full-precision forward pass.  Calibration replaces the layer's weights by the
ridge projection w = argmin ||x @ w.T - (y - bias)||_F^2 + lambda ||w||_F^2,
with lambda chosen from the singular spectrum of x: large enough to suppress
directions the batch barely supports, small enough to preserve the layer's
behaviour on well-supported ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .errors import NumericalError
from .linalg import ridge_from_svd, svd
from .models import LayerSnapshot, ToyModel, activation_forward, check_batch

WELL_CONDITIONED = "well_conditioned"
ILL_CONDITIONED = "ill_conditioned"
RANK_DEFICIENT = "rank_deficient"

# multiplier on cond_rankdef beyond which the spectrum is treated as
# effectively rank-deficient rather than merely ill-conditioned
_RANKDEF_MARGIN = 10.0


@dataclass(frozen=True)
class LambdaPolicy:
    """How to pick the ridge strength for one layer.

    mode="fixed" uses `value` verbatim; mode="auto" applies the spectrum rule:
    lambda = factor * (smallest singular value kept), where severely
    ill-conditioned spectra keep only the leading part with condition number
    at most cond_rankdef.
    """

    mode: str = "auto"
    value: float | None = None
    factor: float = 5.0
    cond_ill: float = 1e2
    cond_rankdef: float = 1e3

    def __post_init__(self) -> None:
        if self.mode not in ("auto", "fixed"):
            raise ValueError(f"mode must be 'auto' or 'fixed', got {self.mode!r}")
        if self.mode == "fixed":
            if self.value is None or self.value < 0:
                raise ValueError("fixed mode needs a non-negative value")
        if not 2.0 <= self.factor <= 5.0:
            raise ValueError(f"factor must lie in [2, 5], got {self.factor}")
        if not (self.cond_ill > 0 and self.cond_rankdef > 0):
            raise ValueError("condition thresholds must be positive")
        if self.cond_ill > self.cond_rankdef:
            raise ValueError("cond_ill must not exceed cond_rankdef")


def select_lambda(singular_values, policy: LambdaPolicy = LambdaPolicy()) -> tuple[float, str]:
    """Pick (lambda, rationale) from a singular spectrum.

    Rationale is one of well_conditioned / ill_conditioned / rank_deficient
    and is reported even when a fixed policy overrides the value.
    """
    s = np.asarray(singular_values, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("singular_values must be a non-empty vector")
    if not np.isfinite(s).all() or (s < 0).any():
        raise ValueError("singular values must be finite and non-negative")
    nonzero = s[s > 0]
    if nonzero.size == 0:
        raise NumericalError("all singular values are zero; cannot select lambda")
    smax = float(nonzero.max())
    smin = float(nonzero.min())
    cond = smax / smin
    if cond <= policy.cond_ill:
        rationale = WELL_CONDITIONED
        pivot = smin
    elif cond <= _RANKDEF_MARGIN * policy.cond_rankdef:
        rationale = ILL_CONDITIONED
        pivot = smin
    else:
        rationale = RANK_DEFICIENT
        kept = nonzero[smax / nonzero <= policy.cond_rankdef]
        pivot = float(kept.min())
    if policy.mode == "fixed":
        return float(policy.value), rationale
    return policy.factor * pivot, rationale


def _guard_zero_lambda(lam: float, cond: float, policy: LambdaPolicy) -> None:
    """Refuse lambda=0 beyond the conditioning the policy treats as rank-deficient."""
    if lam == 0.0 and cond > policy.cond_rankdef:
        raise NumericalError(
            f"condition number {cond:.3g} exceeds {policy.cond_rankdef:.3g}: the batch is "
            "effectively rank-deficient and lambda=0 would amplify recording noise. "
            "Use automatic lambda selection or pass a positive lambda."
        )


@dataclass(frozen=True)
class CalibrationBatch:
    """Stacked inputs x and the matching recorded outputs y of one layer."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError("x and y must be 2-d")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"x and y row counts differ: {x.shape[0]} vs {y.shape[0]}")
        if x.shape[0] < 1:
            raise ValueError("calibration batch must be non-empty")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ValueError("calibration batch contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]


@dataclass
class CalibrationReport:
    """Diagnostics for one calibrated layer; every scalar recorded is finite."""

    layer: str
    lam: float
    rationale: str
    condition_number: float
    sigma_max: float
    sigma_min_nonzero: float
    w_norm_before: float
    w_norm_after: float
    residual: float
    n_samples: int
    heldout_residual: float | None = None

    def to_dict(self) -> dict:
        out = {
            "layer": self.layer,
            "lambda": self.lam,
            "rationale": self.rationale,
            "condition_number": self.condition_number,
            "sigma_max": self.sigma_max,
            "sigma_min_nonzero": self.sigma_min_nonzero,
            "w_norm_before": self.w_norm_before,
            "w_norm_after": self.w_norm_after,
            "residual": self.residual,
            "n_samples": self.n_samples,
        }
        if self.heldout_residual is not None:
            out["heldout_residual"] = self.heldout_residual
        return out


def capture(model: ToyModel, inputs) -> dict[str, CalibrationBatch]:
    """Run one full-precision forward pass, recording each layer's exact (x, y)."""
    a = check_batch(inputs, model.input_dim)
    batches: dict[str, CalibrationBatch] = {}
    for layer, act in zip(model.layers, model.activations):
        y = layer.apply(a)
        batches[layer.name] = CalibrationBatch(x=a, y=y)
        a = activation_forward(act, y)
    return batches


def calibrate_layer(
    layer: LayerSnapshot,
    batch: CalibrationBatch,
    policy: LambdaPolicy = LambdaPolicy(),
    eval_x: np.ndarray | None = None,
) -> tuple[LayerSnapshot, CalibrationReport]:
    """Replace the layer's weights by the regularized projection onto the batch.

    The bias is kept frozen; targets are y - bias.  When eval_x is supplied the
    report also carries ||eval_x @ (w_new - w_old).T||_F as a held-out residual.
    """
    if batch.x.shape[1] != layer.d_in:
        raise ValueError(
            f"batch has {batch.x.shape[1]} input features, layer {layer.name!r} expects {layer.d_in}"
        )
    if batch.y.shape[1] != layer.d_out:
        raise ValueError(
            f"batch has {batch.y.shape[1]} outputs, layer {layer.name!r} produces {layer.d_out}"
        )
    decomp = svd(batch.x)
    lam, rationale = select_lambda(decomp.s, policy)
    nonzero = decomp.s[decomp.s > 0]
    _guard_zero_lambda(lam, float(nonzero.max() / nonzero.min()), policy)
    targets = batch.y - layer.bias
    w_new = ridge_from_svd(decomp, targets, lam)
    report = CalibrationReport(
        layer=layer.name,
        lam=float(lam),
        rationale=rationale,
        condition_number=float(nonzero.max() / nonzero.min()),
        sigma_max=float(decomp.s[0]),
        sigma_min_nonzero=float(nonzero.min()),
        w_norm_before=float(np.linalg.norm(layer.w)),
        w_norm_after=float(np.linalg.norm(w_new)),
        residual=float(np.linalg.norm(batch.x @ w_new.T - targets)),
        n_samples=batch.n_samples,
    )
    if eval_x is not None:
        eval_x = np.asarray(eval_x, dtype=np.float64)
        report.heldout_residual = float(np.linalg.norm(eval_x @ (w_new - layer.w).T))
    return layer.with_weights(w_new), report


def calibrate_model(
    model: ToyModel,
    inputs,
    policy: LambdaPolicy = LambdaPolicy(),
    eval_inputs=None,
) -> tuple[ToyModel, list[CalibrationReport]]:
    """Calibrate every layer against activations captured from the original model.

    All layers see the original model's activations from a single capture pass,
    not sequentially updated ones.
    """
    batches = capture(model, inputs)
    eval_batches = capture(model, eval_inputs) if eval_inputs is not None else None
    new_layers: list[LayerSnapshot] = []
    reports: list[CalibrationReport] = []
    for layer in model.layers:
        eval_x = eval_batches[layer.name].x if eval_batches is not None else None
        new_layer, report = calibrate_layer(layer, batches[layer.name], policy, eval_x=eval_x)
        new_layers.append(new_layer)
        reports.append(report)
    return ToyModel(tuple(new_layers), model.activations, model.qconfig), reports


class RidgeCalibrator(RegressorMixin, BaseEstimator):
    """Scikit-learn style estimator for the spectrum-driven ridge projection.

    fit(X, Y) computes coef_ of shape (n_outputs, n_features) minimizing
    ||X @ coef_.T - Y||_F^2 + lambda ||coef_||_F^2 with lambda picked by the
    singular-spectrum rule (lam="auto") or given verbatim (lam=<float>).
    """

    def __init__(
        self,
        lam: float | str = "auto",
        factor: float = 5.0,
        cond_ill: float = 1e2,
        cond_rankdef: float = 1e3,
    ):
        self.lam = lam
        self.factor = factor
        self.cond_ill = cond_ill
        self.cond_rankdef = cond_rankdef

    def _policy(self) -> LambdaPolicy:
        if isinstance(self.lam, str):
            if self.lam != "auto":
                raise ValueError(f"lam must be 'auto' or a number, got {self.lam!r}")
            return LambdaPolicy(
                mode="auto",
                factor=self.factor,
                cond_ill=self.cond_ill,
                cond_rankdef=self.cond_rankdef,
            )
        return LambdaPolicy(
            mode="fixed",
            value=float(self.lam),
            factor=self.factor,
            cond_ill=self.cond_ill,
            cond_rankdef=self.cond_rankdef,
        )

    def fit(self, X, Y):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        decomp = svd(X)
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X and Y row counts differ: {X.shape[0]} vs {Y.shape[0]}")
        policy = self._policy()
        lam, rationale = select_lambda(decomp.s, policy)
        nonzero = decomp.s[decomp.s > 0]
        cond = float(nonzero.max() / nonzero.min())
        _guard_zero_lambda(lam, cond, policy)
        self.coef_ = ridge_from_svd(decomp, Y, lam)
        self.lambda_ = float(lam)
        self.rationale_ = rationale
        self.condition_number_ = cond
        self.singular_values_ = decomp.s.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "coef_"):
            raise NotFittedError(
                f"This {type(self).__name__} instance is not fitted yet; call fit first."
            )
        X = np.asarray(X, dtype=np.float64)
        return X @ self.coef_.T
