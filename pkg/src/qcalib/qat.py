"""Deterministic quantization-aware training simulator for toy linear stacks.

Each enabled layer computes fake_quantize(x) @ fake_quantize(w).T + b in the
forward pass, with observers refreshed from the live tensors every step (or
frozen after a configurable step).  Gradients cross the fake-quant nodes via
the straight-through mask, and parameters follow plain gradient descent, so a
(seed, config, data) triple reproduces the loss history bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import LambdaPolicy, calibrate_model
from .errors import NumericalError
from .generators import correlated_input_map
from .models import (
    LayerQuantConfig,
    LayerSnapshot,
    ToyModel,
    activation_forward,
    activation_grad,
    check_batch,
)
from .quantizers import (
    ClipStats,
    QuantParams,
    QuantSpec,
    fake_quantize,
    minmax_observe,
    sigma_observe,
    ste_backward,
)

INIT_MODES = ("minmax", "calibrated")


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop knobs; loss is mean squared error."""

    seed: int = 0
    steps: int = 200
    learning_rate: float = 0.02
    batch_size: int = 64
    freeze_observers_after: int | None = None
    loss: str = "mse"

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        # learning_rate 0 is allowed: a no-op step that still reports the loss
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss != "mse":
            raise ValueError(f"only 'mse' loss is supported, got {self.loss!r}")
        if self.freeze_observers_after is not None and self.freeze_observers_after < 0:
            raise ValueError("freeze_observers_after must be >= 0")


_Observer = tuple[ClipStats | None, QuantParams] | None


@dataclass
class QATState:
    """Mutable loop state: step counter, frozen observer snapshots, and the
    (activation, weight) observers each layer actually used on the last step."""

    step: int = 0
    frozen: list[tuple[_Observer, _Observer]] | None = None
    observers_used: list[tuple[_Observer, _Observer]] | None = None


def _observe(data: np.ndarray, spec: QuantSpec | None, alpha: float | None) -> _Observer:
    if spec is None:
        return None
    if alpha is None:
        return None, minmax_observe(data, spec)
    return sigma_observe(data, spec, alpha)


def qat_forward(
    model: ToyModel,
    x,
    frozen: list[tuple[_Observer, _Observer]] | None = None,
) -> tuple[np.ndarray, list[dict]]:
    """Quantized forward pass returning the output and a tape of intermediates.

    With every fake-quant node disabled the result equals the plain forward
    pass exactly.  `frozen` supplies pre-fitted observers per layer instead of
    refreshing them from the live tensors.
    """
    a = check_batch(x, model.input_dim)
    qconfig = model.qconfig or tuple(LayerQuantConfig() for _ in model.layers)
    tape: list[dict] = []
    for i, (layer, act, cfg) in enumerate(zip(model.layers, model.activations, qconfig)):
        a_obs = frozen[i][0] if frozen is not None else _observe(a, cfg.activation, cfg.activation_alpha)
        w_obs = frozen[i][1] if frozen is not None else _observe(layer.w, cfg.weight, cfg.weight_alpha)
        a_q = a if a_obs is None else fake_quantize(a, a_obs[1], a_obs[0])
        w_q = layer.w if w_obs is None else fake_quantize(layer.w, w_obs[1], w_obs[0])
        z = a_q @ w_q.T + layer.bias
        tape.append(
            {
                "a": a,
                "a_q": a_q,
                "w_q": w_q,
                "z": z,
                "act": act,
                "a_obs": a_obs,
                "w_obs": w_obs,
            }
        )
        a = activation_forward(act, z)
    return a, tape


def qat_step(
    model: ToyModel,
    x,
    target,
    config: TrainConfig,
    state: QATState | None = None,
) -> tuple[ToyModel, float, QATState]:
    """One observer + forward + STE backward + gradient-descent update.

    Returns the updated model, the pre-update MSE loss, and the advanced state.
    Observers therefore see the post-update weights on the next step.
    """
    state = state or QATState()
    target = np.asarray(target, dtype=np.float64)
    freeze_at = config.freeze_observers_after
    use_frozen = state.frozen if (freeze_at is not None and state.frozen is not None) else None
    out, tape = qat_forward(model, x, frozen=use_frozen)
    if target.shape != out.shape:
        raise ValueError(f"target shape {target.shape} != output shape {out.shape}")

    diff = out - target
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at step {state.step}; "
            f"max |output| = {np.abs(out).max():.6g}, learning rate {config.learning_rate}"
        )

    g = (2.0 / diff.size) * diff
    new_layers: list[LayerSnapshot] = list(model.layers)
    lr = config.learning_rate
    for i in range(len(model.layers) - 1, -1, -1):
        entry = tape[i]
        layer = model.layers[i]
        g = g * activation_grad(entry["act"], entry["z"])
        grad_wq = g.T @ entry["a_q"]
        grad_b = g.sum(axis=0)
        if entry["w_obs"] is None:
            grad_w = grad_wq
        else:
            clip, params = entry["w_obs"]
            grad_w = ste_backward(grad_wq, layer.w, params, clip)
        g_aq = g @ entry["w_q"]
        if entry["a_obs"] is None:
            g = g_aq
        else:
            clip, params = entry["a_obs"]
            g = ste_backward(g_aq, entry["a"], params, clip)
        new_layers[i] = LayerSnapshot(
            name=layer.name,
            w=layer.w - lr * grad_w,
            bias=layer.bias - lr * grad_b,
        )

    used = [(entry["a_obs"], entry["w_obs"]) for entry in tape]
    frozen = state.frozen
    if freeze_at is not None and frozen is None and state.step >= freeze_at:
        frozen = used
    new_model = ToyModel(tuple(new_layers), model.activations, model.qconfig)
    return new_model, loss, QATState(step=state.step + 1, frozen=frozen, observers_used=used)


@dataclass(frozen=True)
class ExperimentConfig:
    """Teacher-student experiment setup: quant layout plus the training config.

    input_decay < 1 draws training and calibration inputs from a correlated
    distribution whose covariance spectrum decays geometrically to that value:
    redundant inputs are what let the calibration step prune weight components
    the data barely supports.
    """

    train: TrainConfig = TrainConfig()
    weight_bits: int | None = 2
    act_bits: int | None = 4
    weight_axis: int | None = 0
    act_axis: int | None = None
    scheme: str = "sigma"
    alpha: float = 3.0
    signed_weights: bool = True
    signed_acts: bool = True
    calib_samples: int = 16384
    policy: LambdaPolicy = LambdaPolicy(factor=3.0)
    input_decay: float = 0.02

    def __post_init__(self) -> None:
        if self.scheme not in ("minmax", "sigma"):
            raise ValueError(f"scheme must be 'minmax' or 'sigma', got {self.scheme!r}")
        if self.calib_samples < 1:
            raise ValueError("calib_samples must be >= 1")
        if not 0 < self.input_decay <= 1:
            raise ValueError(f"input_decay must lie in (0, 1], got {self.input_decay}")

    def layer_config(self) -> LayerQuantConfig:
        alpha = self.alpha if self.scheme == "sigma" else None
        return LayerQuantConfig(
            weight=None
            if self.weight_bits is None
            else QuantSpec(self.weight_bits, self.signed_weights, self.weight_axis),
            activation=None
            if self.act_bits is None
            else QuantSpec(self.act_bits, self.signed_acts, self.act_axis),
            weight_alpha=None if self.weight_bits is None else alpha,
            activation_alpha=None if self.act_bits is None else alpha,
        )


@dataclass
class ExperimentResult:
    init: str
    losses: list[float]
    model: ToyModel


def run_experiment(
    teacher: ToyModel,
    init: str,
    config: ExperimentConfig = ExperimentConfig(),
) -> ExperimentResult:
    """Train a quantized student against a full-precision teacher.

    init="minmax" starts from the raw teacher weights; init="calibrated"
    starts from the ridge-calibrated weights.  Both arms consume identical
    data streams for a given seed, so loss histories are directly comparable.
    """
    if init not in INIT_MODES:
        raise ValueError(f"init must be one of {INIT_MODES}, got {init!r}")
    d_in = teacher.input_dim
    mix = correlated_input_map(np.random.default_rng([config.train.seed, 2]), d_in, config.input_decay)

    base = ToyModel(teacher.layers, teacher.activations)
    if init == "calibrated":
        calib_rng = np.random.default_rng([config.train.seed, 1])
        calib_x = calib_rng.standard_normal((config.calib_samples, d_in)) @ mix.T
        base, _ = calibrate_model(base, calib_x, config.policy)

    cfg = config.layer_config()
    student = base.with_qconfig([cfg] * len(base.layers))

    rng = np.random.default_rng([config.train.seed, 0])
    state = QATState()
    losses: list[float] = []
    for _ in range(config.train.steps):
        xb = rng.standard_normal((config.train.batch_size, d_in)) @ mix.T
        tb = teacher.forward(xb)
        student, loss, state = qat_step(student, xb, tb, config.train, state)
        losses.append(loss)
    return ExperimentResult(init=init, losses=losses, model=student)
