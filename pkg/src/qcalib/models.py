"""Small dense linear stacks shared by activation capture, calibration, and QAT."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .quantizers import QuantSpec

ACTIVATION_NAMES = ("none", "relu", "gelu")
ACTIVATION_CODES = {name: i for i, name in enumerate(ACTIVATION_NAMES)}

_GELU_C = np.sqrt(2.0 / np.pi)


def activation_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "none":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "gelu":
        # tanh form; the gradient below matches it exactly
        inner = _GELU_C * (z + 0.044715 * z**3)
        return 0.5 * z * (1.0 + np.tanh(inner))
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "none":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "gelu":
        inner = _GELU_C * (z + 0.044715 * z**3)
        t = np.tanh(inner)
        return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z**2)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class LayerSnapshot:
    """One affine layer: y = x @ w.T + bias."""

    name: str
    w: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"layer {self.name!r}: w must be 2-d, got shape {w.shape}")
        bias = np.array(self.bias, dtype=np.float64)
        if bias.ndim != 1 or bias.shape[0] != w.shape[0]:
            raise ValueError(
                f"layer {self.name!r}: bias must have length {w.shape[0]}, got shape {bias.shape}"
            )
        if not (np.isfinite(w).all() and np.isfinite(bias).all()):
            raise ValueError(f"layer {self.name!r}: non-finite parameter values")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "bias", bias)

    @property
    def d_out(self) -> int:
        return self.w.shape[0]

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.T + self.bias

    def with_weights(self, w: np.ndarray) -> "LayerSnapshot":
        return replace(self, w=w)


@dataclass(frozen=True)
class LayerQuantConfig:
    """Per-layer quantization switches for the training simulator.

    A None spec disables that fake-quant node; a None alpha selects the raw
    min/max window, a positive alpha the variance-clipped window.
    """

    weight: QuantSpec | None = None
    activation: QuantSpec | None = None
    weight_alpha: float | None = None
    activation_alpha: float | None = None

    def __post_init__(self) -> None:
        for label, alpha in (("weight_alpha", self.weight_alpha), ("activation_alpha", self.activation_alpha)):
            if alpha is not None and not alpha > 0:
                raise ValueError(f"{label} must be positive, got {alpha}")


@dataclass(frozen=True)
class ToyModel:
    """Ordered stack of affine layers with a nonlinearity tag after each one."""

    layers: tuple[LayerSnapshot, ...]
    activations: tuple[str, ...]
    qconfig: tuple[LayerQuantConfig, ...] | None = None

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        activations = tuple(self.activations)
        qconfig = tuple(self.qconfig) if self.qconfig is not None else None
        if not layers:
            raise ValueError("a model needs at least one layer")
        if len(activations) != len(layers):
            raise ValueError(
                f"{len(layers)} layers but {len(activations)} activation tags"
            )
        for act in activations:
            if act not in ACTIVATION_NAMES:
                raise ValueError(f"unknown activation {act!r}; choose from {ACTIVATION_NAMES}")
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError(
                    f"layer {nxt.name!r} expects {nxt.d_in} inputs but "
                    f"{prev.name!r} produces {prev.d_out}"
                )
        if qconfig is not None and len(qconfig) != len(layers):
            raise ValueError(f"{len(layers)} layers but {len(qconfig)} quant configs")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "activations", activations)
        object.__setattr__(self, "qconfig", qconfig)

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].d_out

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Full-precision forward pass (quant config, if any, is ignored)."""
        a = check_batch(x, self.input_dim)
        for layer, act in zip(self.layers, self.activations):
            a = activation_forward(act, layer.apply(a))
        return a

    def with_qconfig(self, qconfig) -> "ToyModel":
        return ToyModel(self.layers, self.activations, tuple(qconfig) if qconfig else None)


def check_batch(x, d_in: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"input batch must be 2-d, got shape {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("input batch must be non-empty")
    if x.shape[1] != d_in:
        raise ValueError(f"input batch has {x.shape[1]} features, model expects {d_in}")
    if not np.isfinite(x).all():
        raise ValueError("input batch contains non-finite values")
    return x


def model_to_set(model: ToyModel) -> dict[str, np.ndarray]:
    """Flatten a model into container entries: <name>.w, <name>.b, <name>.act."""
    entries: dict[str, np.ndarray] = {}
    for layer, act in zip(model.layers, model.activations):
        entries[f"{layer.name}.w"] = layer.w.astype(np.float32)
        entries[f"{layer.name}.b"] = layer.bias.astype(np.float32)
        entries[f"{layer.name}.act"] = np.array([ACTIVATION_CODES[act]], dtype=np.int32)
    return entries


def model_from_set(entries: dict[str, np.ndarray]) -> ToyModel:
    """Rebuild a model from container entries; layer order follows the .w entries."""
    layers: list[LayerSnapshot] = []
    activations: list[str] = []
    for key, value in entries.items():
        if not key.endswith(".w"):
            continue
        name = key[: -len(".w")]
        if f"{name}.b" not in entries:
            raise ValueError(f"layer {name!r} has weights but no bias entry")
        act = "none"
        if f"{name}.act" in entries:
            code = int(np.asarray(entries[f"{name}.act"]).ravel()[0])
            if code not in range(len(ACTIVATION_NAMES)):
                raise ValueError(f"layer {name!r} has unknown activation code {code}")
            act = ACTIVATION_NAMES[code]
        layers.append(LayerSnapshot(name=name, w=value, bias=entries[f"{name}.b"]))
        activations.append(act)
    if not layers:
        raise ValueError("container holds no <name>.w entries")
    return ToyModel(tuple(layers), tuple(activations))
