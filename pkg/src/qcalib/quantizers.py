"""Uniform affine quantization: range rules, observers, fake quantization, STE masks.

The quantizer maps reals to integer codes as clip(round(x / s) + z, qmin, qmax)
with round-half-to-even, and back as (q - z) * s.  Observers fit the scale and
zero point either from raw extremes (min/max) or from a variance-driven clip
window [mu - alpha * sigma, mu + alpha * sigma] that discards tail values
before the range is measured.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

ROUNDING_MODES = ("half-even", "identity")


@dataclass(frozen=True)
class QuantSpec:
    """Static quantizer configuration: bit width, signedness, granularity.

    axis=None fits one (scale, zero_point) pair for the whole tensor; an
    integer axis fits an independent pair per slice along that axis.
    """

    bits: int = 8
    signed: bool = True
    axis: int | None = None

    def __post_init__(self) -> None:
        if not 2 <= int(self.bits) <= 8:
            raise ValueError(f"bits must lie in [2, 8], got {self.bits}")

    @property
    def per_axis(self) -> bool:
        return self.axis is not None


def qrange(spec: QuantSpec) -> tuple[int, int]:
    """Integer code range: signed [-2^(b-1), 2^(b-1)-1], unsigned [0, 2^b-1]."""
    if spec.signed:
        return -(1 << (spec.bits - 1)), (1 << (spec.bits - 1)) - 1
    return 0, (1 << spec.bits) - 1


@dataclass(frozen=True)
class QuantParams:
    """Fitted quantizer state: one (scale, zero_point) pair per group."""

    spec: QuantSpec
    scale: np.ndarray
    zero_point: np.ndarray

    def __post_init__(self) -> None:
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        zp = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int32))
        if scale.ndim != 1 or zp.ndim != 1 or scale.shape != zp.shape:
            raise ValueError("scale and zero_point must be 1-d vectors of equal length")
        if not self.spec.per_axis and scale.size != 1:
            raise ValueError("per-tensor params must have exactly one group")
        if not (np.isfinite(scale).all() and (scale > 0).all()):
            raise ValueError("every scale must be positive and finite")
        qmin, qmax = qrange(self.spec)
        if ((zp < qmin) | (zp > qmax)).any():
            raise ValueError(f"zero_point outside [{qmin}, {qmax}]")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)

    @property
    def n_groups(self) -> int:
        return self.scale.size


@dataclass(frozen=True)
class ClipStats:
    """Per-group mean/deviation defining the clip window [mu - a*sigma, mu + a*sigma]."""

    mu: np.ndarray
    sigma: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise ValueError("mu and sigma must be 1-d vectors of equal length")
        if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
            raise ValueError("mu and sigma must be finite")
        if (sigma < 0).any():
            raise ValueError("sigma must be non-negative")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def window(self) -> tuple[np.ndarray, np.ndarray]:
        half = self.alpha * self.sigma
        return self.mu - half, self.mu + half


def _check_tensor(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def _group_axis(spec: QuantSpec, x: np.ndarray) -> int | None:
    if spec.axis is None:
        return None
    axis = spec.axis
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for tensor of rank {x.ndim}")
    return axis % x.ndim


def _per_group(vec: np.ndarray, x: np.ndarray, axis: int | None) -> np.ndarray:
    """Reshape a group vector so it broadcasts against x along the group axis."""
    if axis is None:
        return vec.reshape(())
    if vec.size != x.shape[axis]:
        raise ValueError(
            f"got {vec.size} groups for axis {axis} of length {x.shape[axis]}"
        )
    shape = [1] * x.ndim
    shape[axis] = -1
    return vec.reshape(shape)


def _reduce(x: np.ndarray, axis: int | None, fn) -> np.ndarray:
    if axis is None:
        return np.atleast_1d(fn(x))
    other = tuple(i for i in range(x.ndim) if i != axis)
    return np.atleast_1d(fn(x, axis=other) if other else fn(x, axis=()))


def _params_from_bounds(lo: np.ndarray, hi: np.ndarray, spec: QuantSpec) -> QuantParams:
    """MinMax fitting rule applied to per-group bounds; degenerate groups get scale 1."""
    qmin, qmax = qrange(spec)
    span = hi - lo
    degenerate = span <= 0
    scale = np.where(degenerate, 1.0, span / (qmax - qmin))
    zp = np.round(qmin - lo / scale)
    zero_point = np.clip(zp, qmin, qmax).astype(np.int32)
    return QuantParams(spec, scale, zero_point)


def minmax_observe(x, spec: QuantSpec) -> QuantParams:
    """Fit scale/zero-point from raw per-group extremes."""
    x = _check_tensor(x)
    axis = _group_axis(spec, x)
    lo = _reduce(x, axis, np.min)
    hi = _reduce(x, axis, np.max)
    return _params_from_bounds(lo, hi, spec)


def sigma_observe(x, spec: QuantSpec, alpha: float) -> tuple[ClipStats, QuantParams]:
    """Fit clip stats plus scale/zero-point from the variance-clipped range.

    mu/sigma are the per-group mean and population standard deviation; groups
    with sigma == 0 fall back to the raw min/max rule.
    """
    x = _check_tensor(x)
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    axis = _group_axis(spec, x)
    mu = _reduce(x, axis, np.mean)
    sigma = np.sqrt(_reduce(x, axis, np.var))
    raw_lo = _reduce(x, axis, np.min)
    raw_hi = _reduce(x, axis, np.max)
    lo = np.where(sigma > 0, mu - alpha * sigma, raw_lo)
    hi = np.where(sigma > 0, mu + alpha * sigma, raw_hi)
    return ClipStats(mu, sigma, float(alpha)), _params_from_bounds(lo, hi, spec)


def _broadcast_params(x: np.ndarray, p: QuantParams):
    axis = _group_axis(p.spec, x)
    if axis is not None and p.n_groups != x.shape[axis]:
        raise ValueError(
            f"params carry {p.n_groups} groups but axis {axis} has length {x.shape[axis]}"
        )
    s = _per_group(p.scale, x, axis)
    z = _per_group(p.zero_point.astype(np.float64), x, axis)
    return s, z, axis


def apply_clip(x, p: QuantParams, clip: ClipStats | None) -> np.ndarray:
    """Clip x to the window of `clip`, broadcast along the spec's group axis."""
    x = np.asarray(x, dtype=np.float64)
    if clip is None:
        return x
    axis = _group_axis(p.spec, x)
    lo, hi = clip.window()
    return np.clip(x, _per_group(lo, x, axis), _per_group(hi, x, axis))


def quantize(x, p: QuantParams) -> np.ndarray:
    """Integer codes clip(round(x / s) + z, qmin, qmax), round-half-to-even."""
    x = _check_tensor(x)
    s, z, _ = _broadcast_params(x, p)
    qmin, qmax = qrange(p.spec)
    return np.clip(np.round(x / s) + z, qmin, qmax).astype(np.int32)


def dequantize(q, p: QuantParams) -> np.ndarray:
    """Reals (q - z) * s; rejects codes outside the spec's integer range."""
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.integer):
        raise ValueError(f"codes must be integers, got dtype {q.dtype}")
    qmin, qmax = qrange(p.spec)
    if ((q < qmin) | (q > qmax)).any():
        raise ValueError(f"codes outside [{qmin}, {qmax}]")
    s, z, _ = _broadcast_params(q.astype(np.float64), p)
    return (q.astype(np.float64) - z) * s


def effective_window(
    x, p: QuantParams, clip: ClipStats | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise interval where the quantizer is neither clipped nor saturated.

    The representable span [(qmin - z) * s, (qmax - z) * s] intersected with
    the clip window when one is supplied.
    """
    x = np.asarray(x, dtype=np.float64)
    s, z, axis = _broadcast_params(x, p)
    qmin, qmax = qrange(p.spec)
    lo = np.broadcast_to((qmin - z) * s, x.shape)
    hi = np.broadcast_to((qmax - z) * s, x.shape)
    if clip is not None:
        clo, chi = clip.window()
        lo = np.maximum(lo, _per_group(clo, x, axis))
        hi = np.minimum(hi, _per_group(chi, x, axis))
    return lo, hi


def fake_quantize(
    x,
    p: QuantParams,
    clip: ClipStats | None = None,
    *,
    rounding: str = "half-even",
) -> np.ndarray:
    """Quantize-then-dequantize (after the optional clip), simulating low-bit storage.

    rounding="identity" replaces the rounding step by the identity while
    keeping clipping and saturation; that variant is the continuous envelope
    used to validate straight-through gradients.
    """
    if rounding not in ROUNDING_MODES:
        raise ValueError(f"rounding must be one of {ROUNDING_MODES}, got {rounding!r}")
    x = _check_tensor(x)
    xc = apply_clip(x, p, clip)
    if rounding == "half-even":
        return dequantize(quantize(xc, p), p)
    s, z, _ = _broadcast_params(xc, p)
    qmin, qmax = qrange(p.spec)
    return (np.clip(xc / s + z, qmin, qmax) - z) * s


def ste_backward(
    upstream,
    x,
    p: QuantParams,
    clip: ClipStats | None = None,
) -> np.ndarray:
    """Straight-through gradient: pass upstream inside the effective window, zero outside.

    Window boundaries belong to the pass-through region.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} != x shape {x.shape}")
    lo, hi = effective_window(x, p, clip)
    mask = (x >= lo) & (x <= hi)
    return np.where(mask, upstream, 0.0)


def bin_occupancy(q, spec: QuantSpec) -> np.ndarray:
    """Exact count of codes at each integer level qmin..qmax (whole tensor)."""
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.integer):
        raise ValueError(f"codes must be integers, got dtype {q.dtype}")
    qmin, qmax = qrange(spec)
    if ((q < qmin) | (q > qmax)).any():
        raise ValueError(f"codes outside [{qmin}, {qmax}]")
    return np.bincount((q.ravel() - qmin).astype(np.int64), minlength=qmax - qmin + 1)


class MinMaxQuantizer(TransformerMixin, BaseEstimator):
    """Uniform affine fake quantizer fitted from raw data extremes.

    fit() observes scale/zero-point, transform() returns the quantize-
    dequantize round trip of its input.  Composes with scikit-learn
    pipelines via get_params/set_params.
    """

    def __init__(self, bits: int = 8, signed: bool = True, axis: int | None = None):
        self.bits = bits
        self.signed = signed
        self.axis = axis

    def _spec(self) -> QuantSpec:
        return QuantSpec(bits=self.bits, signed=self.signed, axis=self.axis)

    def fit(self, X, y=None):
        self.params_ = minmax_observe(X, self._spec())
        return self

    def _clip_stats(self) -> ClipStats | None:
        return None

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError(
                f"This {type(self).__name__} instance is not fitted yet; call fit first."
            )

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        return fake_quantize(X, self.params_, self._clip_stats())

    def quantize(self, X) -> np.ndarray:
        self._check_fitted()
        return quantize(apply_clip(_check_tensor(X), self.params_, self._clip_stats()), self.params_)

    def dequantize(self, Q) -> np.ndarray:
        self._check_fitted()
        return dequantize(Q, self.params_)


class SigmaClipQuantizer(MinMaxQuantizer):
    """Fake quantizer whose range comes from the variance-clipped window.

    Values are clipped to [mu - alpha * sigma, mu + alpha * sigma] before
    quantization, concentrating the integer levels on the bulk of the
    distribution instead of stretching them over outliers.
    """

    def __init__(
        self,
        bits: int = 8,
        signed: bool = True,
        axis: int | None = None,
        alpha: float = 3.0,
    ):
        super().__init__(bits=bits, signed=signed, axis=axis)
        self.alpha = alpha

    def fit(self, X, y=None):
        self.clip_stats_, self.params_ = sigma_observe(X, self._spec(), self.alpha)
        return self

    def _clip_stats(self) -> ClipStats | None:
        return self.clip_stats_
