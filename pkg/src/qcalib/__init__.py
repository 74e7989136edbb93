"""Closed-form weight calibration and low-bit uniform quantization for linear layers."""

from .calibration import (
    CalibrationBatch,
    CalibrationReport,
    LambdaPolicy,
    RidgeCalibrator,
    calibrate_layer,
    calibrate_model,
    capture,
    select_lambda,
)
from .errors import NumericalError, TensorFormatError
from .linalg import SvdResult, condition_number, pseudoinverse, ridge_solve, svd
from .models import LayerQuantConfig, LayerSnapshot, ToyModel, model_from_set, model_to_set
from .qat import (
    ExperimentConfig,
    ExperimentResult,
    QATState,
    TrainConfig,
    qat_forward,
    qat_step,
    run_experiment,
)
from .quantizers import (
    ClipStats,
    MinMaxQuantizer,
    QuantParams,
    QuantSpec,
    SigmaClipQuantizer,
    bin_occupancy,
    dequantize,
    effective_window,
    fake_quantize,
    minmax_observe,
    qrange,
    quantize,
    sigma_observe,
    ste_backward,
)
from .reporting import (
    SweepResult,
    default_grid,
    distribution_summary,
    lambda_sweep,
    occupancy_compare,
    quantization_mse,
    tensor_digest,
)
from .tensor_io import read_set, read_tensor, write_set, write_tensor

__version__ = "0.1.0"

__all__ = [
    "CalibrationBatch",
    "CalibrationReport",
    "ClipStats",
    "ExperimentConfig",
    "ExperimentResult",
    "LambdaPolicy",
    "LayerQuantConfig",
    "LayerSnapshot",
    "MinMaxQuantizer",
    "NumericalError",
    "QATState",
    "QuantParams",
    "QuantSpec",
    "RidgeCalibrator",
    "SigmaClipQuantizer",
    "SvdResult",
    "SweepResult",
    "TensorFormatError",
    "ToyModel",
    "TrainConfig",
    "bin_occupancy",
    "calibrate_layer",
    "calibrate_model",
    "capture",
    "condition_number",
    "default_grid",
    "dequantize",
    "distribution_summary",
    "effective_window",
    "fake_quantize",
    "lambda_sweep",
    "minmax_observe",
    "model_from_set",
    "model_to_set",
    "occupancy_compare",
    "pseudoinverse",
    "qat_forward",
    "qat_step",
    "qrange",
    "quantization_mse",
    "quantize",
    "read_set",
    "read_tensor",
    "ridge_solve",
    "run_experiment",
    "select_lambda",
    "sigma_observe",
    "ste_backward",
    "svd",
    "tensor_digest",
    "write_set",
    "write_tensor",
]
