"""Command-line front end wiring the pipeline over QTF/QTS files.

Every subcommand writes its outputs plus a manifest.json recording the tool
version, the resolved parameters, and content digests of the inputs; `rerun`
replays a manifest and reproduces the outputs byte for byte.  Exit codes:
0 success, 2 usage or file-format problems, 3 numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationBatch, LambdaPolicy, calibrate_layer, capture
from .errors import NumericalError, TensorFormatError
from .generators import heavy_tailed_weights, illcond_problem, toy_teacher
from .models import LayerSnapshot, ToyModel, model_from_set, model_to_set
from .qat import ExperimentConfig, TrainConfig, run_experiment
from .quantizers import QuantSpec, apply_clip, minmax_observe, quantize, sigma_observe
from .reporting import SWEEP_CSV_COLUMNS, lambda_sweep, occupancy_compare
from .tensor_io import read_set, write_set

PRESETS = ("fig2", "illcond", "teacher")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _load_model(path: str) -> ToyModel:
    return model_from_set(read_set(path))


def _layer_batches(model: ToyModel, data: dict[str, np.ndarray]) -> dict[str, CalibrationBatch]:
    """Calibration batches either captured from raw `inputs` or prerecorded per layer."""
    if "inputs" in data:
        return capture(model, np.asarray(data["inputs"], dtype=np.float64))
    batches = {}
    for layer in model.layers:
        xk, yk = f"{layer.name}.x", f"{layer.name}.y"
        if xk not in data or yk not in data:
            raise ValueError(
                f"data file must hold either an 'inputs' entry or '{xk}'/'{yk}' pairs"
            )
        batches[layer.name] = CalibrationBatch(x=data[xk], y=data[yk])
    return batches


def _layer_eval_inputs(model: ToyModel, data: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Held-out inputs per layer: captured from raw `inputs` or prerecorded <layer>.x."""
    if "inputs" in data:
        return {name: b.x for name, b in capture(model, np.asarray(data["inputs"], dtype=np.float64)).items()}
    out = {}
    for layer in model.layers:
        xk = f"{layer.name}.x"
        if xk not in data:
            raise ValueError(f"eval file must hold either an 'inputs' entry or '{xk}'")
        out[layer.name] = np.asarray(data[xk], dtype=np.float64)
    return out


def _policy_from_params(params: dict) -> LambdaPolicy:
    lam = params["lambda"]
    kwargs = dict(
        factor=params["factor"],
        cond_ill=params["cond_ill"],
        cond_rankdef=params["cond_rankdef"],
    )
    if lam == "auto":
        return LambdaPolicy(mode="auto", **kwargs)
    return LambdaPolicy(mode="fixed", value=float(lam), **kwargs)


def _parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"--grid must look like LO:HI:COUNT, got {text!r}")
    lo, hi, num = float(parts[0]), float(parts[1]), int(parts[2])
    if num < 2 or not 0 < lo < hi:
        raise ValueError(f"--grid needs 0 < LO < HI and COUNT >= 2, got {text!r}")
    return np.geomspace(lo, hi, num)


def cmd_calibrate(params: dict, outdir: Path) -> tuple[dict, list[str]]:
    model = _load_model(params["model"])
    data = read_set(params["data"])
    policy = _policy_from_params(params)
    batches = _layer_batches(model, data)
    eval_inputs = None
    if params.get("eval"):
        eval_inputs = _layer_eval_inputs(model, read_set(params["eval"]))

    new_layers, reports = [], []
    for layer in model.layers:
        eval_x = eval_inputs[layer.name] if eval_inputs else None
        new_layer, report = calibrate_layer(layer, batches[layer.name], policy, eval_x=eval_x)
        new_layers.append(new_layer)
        reports.append(report.to_dict())
    calibrated = ToyModel(tuple(new_layers), model.activations)

    write_set(outdir / "calibrated.qts", model_to_set(calibrated))
    (outdir / "reports.json").write_text(
        _json_text({"tool_version": __version__, "reports": reports})
    )
    inputs = {"model": params["model"], "data": params["data"]}
    if params.get("eval"):
        inputs["eval"] = params["eval"]
    return inputs, ["calibrated.qts", "reports.json"]


def cmd_quantize(params: dict, outdir: Path) -> tuple[dict, list[str]]:
    model = _load_model(params["model"])
    if params["abits"] is not None and not params.get("activations"):
        raise ValueError("--abits needs --activations FILE to observe activation ranges")

    wspec = QuantSpec(
        bits=params["wbits"], signed=True, axis=0 if params["per_axis"] else None
    )
    entries: dict[str, np.ndarray] = {}
    occupancy: dict[str, dict] = {}
    for layer in model.layers:
        if params["scheme"] == "minmax":
            p = minmax_observe(layer.w, wspec)
            codes = quantize(layer.w, p)
        else:
            clip, p = sigma_observe(layer.w, wspec, params["alpha"])
            codes = quantize(apply_clip(layer.w, p, clip), p)
        entries[f"{layer.name}.scale"] = p.scale.astype(np.float32)
        entries[f"{layer.name}.zero_point"] = p.zero_point.astype(np.int32)
        entries[f"{layer.name}.q"] = codes
        occupancy[layer.name] = occupancy_compare(layer.w, params["wbits"], params["alpha"])

    inputs = {"model": params["model"]}
    if params["abits"] is not None:
        adata = read_set(params["activations"])
        aspec = QuantSpec(bits=params["abits"], signed=True, axis=None)
        eval_inputs = _layer_eval_inputs(model, adata)
        for layer in model.layers:
            x = eval_inputs[layer.name]
            if params["scheme"] == "minmax":
                ap = minmax_observe(x, aspec)
            else:
                _, ap = sigma_observe(x, aspec, params["alpha"])
            entries[f"{layer.name}.a_scale"] = ap.scale.astype(np.float32)
            entries[f"{layer.name}.a_zero_point"] = ap.zero_point.astype(np.int32)
        inputs["activations"] = params["activations"]

    write_set(outdir / "params.qts", entries)
    (outdir / "occupancy.json").write_text(
        _json_text({"tool_version": __version__, "layers": occupancy})
    )
    return inputs, ["params.qts", "occupancy.json"]


def cmd_sweep(params: dict, outdir: Path) -> tuple[dict, list[str]]:
    model = _load_model(params["model"])
    calib = _layer_batches(model, read_set(params["calib"]))
    eval_inputs = _layer_eval_inputs(model, read_set(params["eval"]))
    grid = _parse_grid(params["grid"])
    spec = QuantSpec(bits=params["bits"], signed=True, axis=None)

    outputs: list[str] = []
    payload = {"tool_version": __version__, "grid": params["grid"], "layers": {}}
    for layer in model.layers:
        res = lambda_sweep(layer, calib[layer.name], eval_inputs[layer.name], grid, spec)
        payload["layers"][layer.name] = res.to_dict()
        csv_name = f"sweep_{layer.name}.csv"
        _write_csv(outdir / csv_name, SWEEP_CSV_COLUMNS, res.csv_rows())
        outputs.append(csv_name)
    (outdir / "sweep.json").write_text(_json_text(payload))
    outputs.append("sweep.json")
    return {
        "model": params["model"],
        "calib": params["calib"],
        "eval": params["eval"],
    }, outputs


def cmd_qat(params: dict, outdir: Path) -> tuple[dict, list[str]]:
    teacher = _load_model(params["teacher"])
    config = ExperimentConfig(
        train=TrainConfig(
            seed=params["seed"],
            steps=params["steps"],
            learning_rate=params["lr"],
            batch_size=params["batch_size"],
        ),
        weight_bits=params["wbits"],
        act_bits=params["abits"],
        scheme=params["scheme"],
        alpha=params["alpha"],
        calib_samples=params["calib_samples"],
        policy=LambdaPolicy(factor=params["factor"]),
        input_decay=params["input_decay"],
    )
    result = run_experiment(teacher, params["init"], config)

    _write_csv(
        outdir / "loss.csv",
        ("step", "loss"),
        [(i, repr(loss)) for i, loss in enumerate(result.losses)],
    )
    (outdir / "loss.json").write_text(
        _json_text(
            {
                "tool_version": __version__,
                "init": result.init,
                "final_loss": result.losses[-1],
                "losses": result.losses,
            }
        )
    )
    write_set(outdir / "final_model.qts", model_to_set(result.model))
    return {"teacher": params["teacher"]}, ["loss.csv", "loss.json", "final_model.qts"]


def cmd_gen(params: dict, outdir: Path) -> tuple[dict, list[str]]:
    preset = params["preset"]
    rng = np.random.default_rng(params["seed"])
    if preset == "fig2":
        w = heavy_tailed_weights(rng, (64, 64))
        model = ToyModel(
            (LayerSnapshot("layer0", w, np.zeros(64)),),
            ("none",),
        )
        write_set(outdir / "model.qts", model_to_set(model))
        return {}, ["model.qts"]
    if preset == "illcond":
        prob = illcond_problem(rng)
        model = ToyModel((prob.layer,), ("none",))
        write_set(outdir / "model.qts", model_to_set(model))
        write_set(
            outdir / "calib.qts",
            {
                "layer0.x": prob.calib.x.astype(np.float32),
                "layer0.y": prob.calib.y.astype(np.float32),
            },
        )
        write_set(outdir / "eval.qts", {"layer0.x": prob.eval_x.astype(np.float32)})
        return {}, ["model.qts", "calib.qts", "eval.qts"]
    if preset == "teacher":
        write_set(outdir / "model.qts", model_to_set(toy_teacher(rng)))
        return {}, ["model.qts"]
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")


_HANDLERS = {
    "calibrate": cmd_calibrate,
    "quantize": cmd_quantize,
    "sweep": cmd_sweep,
    "qat": cmd_qat,
    "gen": cmd_gen,
}


def _dispatch(subcommand: str, params: dict, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    inputs, outputs = _HANDLERS[subcommand](params, outdir)
    manifest = {
        "tool": "qcalib",
        "tool_version": __version__,
        "subcommand": subcommand,
        "params": params,
        "out": str(outdir),
        "inputs": {
            label: {"path": path, "sha256": _sha256_file(Path(path))}
            for label, path in inputs.items()
        },
        "outputs": outputs,
    }
    (outdir / "manifest.json").write_text(_json_text(manifest))


def cmd_rerun(manifest_path: str, outdir_override: str | None) -> None:
    manifest = json.loads(Path(manifest_path).read_text())
    for key in ("subcommand", "params", "out"):
        if key not in manifest:
            raise ValueError(f"manifest is missing the {key!r} field")
    subcommand = manifest["subcommand"]
    if subcommand not in _HANDLERS:
        raise ValueError(f"manifest names unknown subcommand {subcommand!r}")
    for label, entry in manifest.get("inputs", {}).items():
        path = Path(entry["path"])
        if not path.exists():
            raise ValueError(f"recorded input {label} missing at {path}")
        if _sha256_file(path) != entry["sha256"]:
            raise ValueError(
                f"recorded input {label} at {path} has changed since the original run"
            )
    outdir = Path(outdir_override) if outdir_override else Path(manifest["out"])
    _dispatch(subcommand, manifest["params"], outdir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qcalib",
        description="Closed-form weight calibration and low-bit quantization toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"qcalib {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("calibrate", help="calibrate model weights against recorded activations")
    p.add_argument("model", help="model container (.qts)")
    p.add_argument("data", help="activations (.qts): 'inputs' entry or <layer>.x/.y pairs")
    p.add_argument("--lambda", dest="lam", default="auto", help="'auto' or a fixed value")
    p.add_argument("--factor", type=float, default=5.0, help="multiplier on the pivot singular value")
    p.add_argument("--cond-ill", type=float, default=1e2)
    p.add_argument("--cond-rankdef", type=float, default=1e3)
    p.add_argument("--eval", default=None, help="held-out inputs (.qts) for residual reporting")
    p.add_argument("--out", required=True)

    p = sub.add_parser("quantize", help="fit quantizer parameters for model weights")
    p.add_argument("model")
    p.add_argument("--wbits", type=int, required=True)
    p.add_argument("--abits", type=int, default=None)
    p.add_argument("--activations", default=None, help="activation data (.qts), needed with --abits")
    p.add_argument("--scheme", choices=("minmax", "sigma"), default="minmax")
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--per-axis", action="store_true", dest="per_axis")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="sweep the ridge strength and report error curves")
    p.add_argument("model")
    p.add_argument("calib")
    p.add_argument("eval")
    p.add_argument("--grid", default="1e-8:1e3:25", help="LO:HI:COUNT, log-spaced")
    p.add_argument("--bits", type=int, default=3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("qat", help="train a quantized student against a teacher model")
    p.add_argument("teacher")
    p.add_argument("--init", choices=("minmax", "calibrated"), default="minmax")
    p.add_argument("--wbits", type=int, default=2)
    p.add_argument("--abits", type=int, default=4)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--scheme", choices=("minmax", "sigma"), default="sigma")
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--calib-samples", type=int, default=16384, dest="calib_samples")
    p.add_argument("--factor", type=float, default=3.0)
    p.add_argument("--input-decay", type=float, default=0.02, dest="input_decay")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen", help="generate seeded synthetic fixtures")
    p.add_argument("--preset", choices=PRESETS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="replay a recorded manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="override the recorded output directory")
    return parser


_PARAM_KEYS = {
    "calibrate": ("model", "data", "lambda", "factor", "cond_ill", "cond_rankdef", "eval"),
    "quantize": ("model", "wbits", "abits", "activations", "scheme", "alpha", "per_axis"),
    "sweep": ("model", "calib", "eval", "grid", "bits"),
    "qat": (
        "teacher",
        "init",
        "wbits",
        "abits",
        "steps",
        "seed",
        "lr",
        "batch_size",
        "scheme",
        "alpha",
        "calib_samples",
        "factor",
        "input_decay",
    ),
    "gen": ("preset", "seed"),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.subcommand == "rerun":
            cmd_rerun(args.manifest, args.out)
        else:
            ns = vars(args)
            ns["lambda"] = ns.pop("lam", None)
            params = {key: ns[key] for key in _PARAM_KEYS[args.subcommand]}
            _dispatch(args.subcommand, params, Path(args.out))
        return 0
    except NumericalError as exc:
        print(f"qcalib: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (TensorFormatError, FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"qcalib: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
