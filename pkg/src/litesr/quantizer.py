"""Post-training INT8 quantization of a LiteSR model.

Weights: per-tensor symmetric, ``q = clamp(round(w / s), -127, 127)`` with
``s = max|w| / 127``. Activations: per-tensor asymmetric min/max observed on
calibration frames. Convolutions run on int8 operands with int32
accumulation and are requantized to their calibrated output range. The
bicubic baselines, guidance mask and the final gated sum stay in FP32.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .model import (
    GATE_KEYS,
    Model,
    ModelConfig,
    ModelWeights,
    SRResult,
    layer_specs,
    run_graph,
    validate_weights,
)
from .tensor import ConvSpec, DTypeError, QTensor, _im2col

ACT_KEY = "quant.activations"
MIN_CALIBRATION_FRAMES = 8
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


class CalibrationError(RuntimeError):
    """Calibration is missing, empty, or was given too few frames."""


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    clip_lo: float = 0.0
    clip_hi: float = 0.0


def _f32(x: float) -> float:
    # Scales round-trip through f32 container fields; keep them f32-exact in memory too.
    return float(np.float32(x))


def symmetric_params(lo: float, hi: float) -> QuantParams:
    bound = max(abs(lo), abs(hi))
    if bound == 0:
        return QuantParams(1.0, 0, lo, hi)
    return QuantParams(_f32(bound / 127.0), 0, lo, hi)


def asymmetric_params(lo: float, hi: float) -> QuantParams:
    """Affine int8 params covering ``[min(lo, 0), max(hi, 0)]``; zero stays exact."""
    lo_, hi_ = min(lo, 0.0), max(hi, 0.0)
    if hi_ == lo_:
        return QuantParams(1.0, 0, lo, hi)
    scale = _f32((hi_ - lo_) / 255.0)
    zp = int(np.clip(np.round(-128 - lo_ / scale), -128, 127))
    return QuantParams(scale, zp, lo, hi)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w) -> QTensor:
    """Symmetric per-tensor int8; an all-zero tensor gets scale 1."""
    w = np.asarray(w, dtype=np.float64)
    qp = symmetric_params(float(w.min(initial=0.0)), float(w.max(initial=0.0)))
    q = np.clip(_round_half_away(w / qp.scale), -127, 127).astype(np.int8)
    return QTensor(q, qp.scale)


def quantize_activation(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    q = _round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize(q: QTensor) -> np.ndarray:
    return q.dequantize()


@dataclass(frozen=True)
class LayerRange:
    in_lo: float
    in_hi: float
    out_lo: float
    out_hi: float

    @property
    def input_params(self) -> QuantParams:
        return asymmetric_params(self.in_lo, self.in_hi)

    @property
    def output_params(self) -> QuantParams:
        return asymmetric_params(self.out_lo, self.out_hi)


class CalibrationSet:
    """Frames plus running per-layer activation extrema.

    ``frames`` holds ``(depth_lr, intensity_lr)`` pairs (or objects with
    ``depth`` / ``intensity`` attributes), already normalized.
    """

    def __init__(self, frames: Iterable = ()):
        self.frames = [_as_pair(f) for f in frames]
        self._lo: dict[str, list[float]] = {}
        self._hi: dict[str, list[float]] = {}
        self.observed = 0

    def add(self, frame) -> None:
        self.frames.append(_as_pair(frame))

    def _update(self, name: str, x: np.ndarray, y: np.ndarray) -> None:
        lo = self._lo.setdefault(name, [np.inf, np.inf])
        hi = self._hi.setdefault(name, [-np.inf, -np.inf])
        for k, arr in enumerate((x, y)):
            lo[k] = min(lo[k], float(arr.min()))
            hi[k] = max(hi[k], float(arr.max()))

    def observe(self, model: Model, frames=None) -> None:
        """Run the FP32 graph on ``frames`` (default: all held frames) and widen ranges."""
        def conv(name, x):
            y = model.conv(name, x)
            self._update(name, x, y)
            return y

        w = model.weights
        for d, i in (self.frames if frames is None else [_as_pair(f) for f in frames]):
            run_graph(model.config, conv, (w.gate_logit_depth, w.gate_logit_intensity), d, i)
            self.observed += 1

    def ranges(self) -> dict[str, LayerRange]:
        return {name: LayerRange(lo[0], self._hi[name][0], lo[1], self._hi[name][1])
                for name, lo in self._lo.items()}


def _as_pair(frame):
    if hasattr(frame, "depth") and hasattr(frame, "intensity"):
        return frame.depth, frame.intensity
    d, i = frame
    return d, i


def calibrate(model: Model, frames, min_frames: int = MIN_CALIBRATION_FRAMES) -> dict[str, LayerRange]:
    """Per-layer activation ranges from an FP32 pass over ``frames``."""
    cal = frames if isinstance(frames, CalibrationSet) else CalibrationSet(frames)
    if not cal.frames:
        raise CalibrationError("calibration set is empty")
    if len(cal.frames) < min_frames:
        raise CalibrationError(f"need at least {min_frames} calibration frames, got {len(cal.frames)}")
    cal.observe(model)
    return cal.ranges()


@dataclass(frozen=True)
class QuantizedModel:
    config: ModelConfig
    weights: ModelWeights
    activations: Mapping[str, LayerRange] | None = None
    specs: Mapping[str, ConvSpec] = field(repr=False, default=None)

    @property
    def is_calibrated(self) -> bool:
        return self.activations is not None

    def forward(self, depth_lr, intensity_lr) -> SRResult:
        return forward_int8(self, depth_lr, intensity_lr)

    def container_entries(self) -> dict:
        entries = dict(self.weights.entries)
        if self.activations is not None:
            table = np.array([[r.in_lo, r.in_hi, r.out_lo, r.out_hi]
                              for r in (self.activations[n] for n in self.specs)], dtype=np.float32)
            entries[ACT_KEY] = table[None, None]
        return entries

    @classmethod
    def from_entries(cls, config: ModelConfig, entries: Mapping) -> "QuantizedModel":
        entries = dict(entries)
        table = entries.pop(ACT_KEY, None)
        specs = layer_specs(config)
        validate_weights(config, ModelWeights(entries))
        acts = None
        if table is not None:
            table = np.asarray(table, dtype=np.float64).reshape(-1, 4)
            if table.shape[0] != len(specs):
                raise CalibrationError(f"activation table has {table.shape[0]} rows, model has {len(specs)} layers")
            acts = {n: LayerRange(*map(float, row)) for n, row in zip(specs, table)}
        return _freeze(config, entries, acts)


def _freeze(config, entries, acts) -> QuantizedModel:
    return QuantizedModel(config, ModelWeights(MappingProxyType(dict(entries))),
                          None if acts is None else MappingProxyType(dict(acts)),
                          MappingProxyType(layer_specs(config)))


def quantize_weights(weights: ModelWeights, activations: Mapping[str, LayerRange] | None = None) -> dict:
    """INT8 weight store.

    Conv weights become symmetric int8 :class:`QTensor`. With calibrated
    ``activations`` each bias becomes int32 at ``scale_w * scale_in``;
    without them biases stay FP32 and the result cannot run until calibrated.
    Gate logits are kept as FP32.
    """
    out = {}
    for path, value in weights.entries.items():
        if isinstance(value, QTensor):
            raise DTypeError(f"{path}: already quantized")
        if path in GATE_KEYS or path == ACT_KEY:
            out[path] = np.float32(value)
        elif path.endswith(".weight"):
            out[path] = quantize_tensor(value)
    for path, value in weights.entries.items():
        if not path.endswith(".bias"):
            continue
        layer = path[: -len(".bias")]
        if activations is None:
            out[path] = np.asarray(value, dtype=np.float32)
        else:
            s = out[f"{layer}.weight"].scale * activations[layer].input_params.scale
            q = _round_half_away(np.asarray(value, dtype=np.float64) / s)
            out[path] = QTensor(np.clip(q, INT32_MIN, INT32_MAX).astype(np.int32), _f32(s))
    return out


def quantize_model(model: Model, frames=None, activations: Mapping[str, LayerRange] | None = None) -> QuantizedModel:
    """Calibrate on ``frames`` (unless ``activations`` are given) and quantize."""
    if activations is None and frames is not None:
        activations = calibrate(model, frames)
    return _freeze(model.config, quantize_weights(model.weights, activations), activations)


def int8_conv2d(xq: np.ndarray, x_zp: int, wq: QTensor, bias_q, spec: ConvSpec) -> np.ndarray:
    """Integer convolution: int8 activations/weights, int32 accumulator.

    Products are summed in float64, which is exact for any accumulator
    that fits in int32 (|acc| < 2**53), then checked and cast.
    """
    kh, kw = spec.kernel
    cols, oh, ow = _im2col((xq.astype(np.int32) - x_zp).astype(np.float64), kh, kw,
                           spec.stride, spec.dilation, spec.padding)
    acc = np.matmul(wq.data.reshape(spec.out_channels, -1).astype(np.float64), cols)
    if bias_q is not None:
        acc += bias_q.data.astype(np.float64)[None, :, None]
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise OverflowError("int32 accumulator overflow")
    return acc.astype(np.int32).reshape(xq.shape[0], spec.out_channels, oh, ow)


def forward_int8(qmodel: QuantizedModel, depth_lr, intensity_lr) -> SRResult:
    if not qmodel.is_calibrated:
        raise CalibrationError("model has no activation calibration; run calibrate/quantize_model first")
    entries = qmodel.weights.entries

    def conv(name, x):
        rng = qmodel.activations[name]
        p_in, p_out = rng.input_params, rng.output_params
        wq = entries[f"{name}.weight"]
        bq = entries.get(f"{name}.bias")
        xq = quantize_activation(x, p_in)
        acc = int8_conv2d(xq, p_in.zero_point, wq, bq, qmodel.specs[name])
        multiplier = p_in.scale * wq.scale / p_out.scale
        q_out = np.clip(_round_half_away(acc * multiplier) + p_out.zero_point, -128, 127)
        return (p_out.scale * (q_out - p_out.zero_point)).astype(np.float32)

    gates = (float(entries["gate.depth"]), float(entries["gate.intensity"]))
    return run_graph(qmodel.config, conv, gates, depth_lr, intensity_lr)


def fp32_reference(qmodel: QuantizedModel) -> Model:
    """Dequantized FP32 model with the same weights, for error analysis."""
    from .model import build_model

    entries = {}
    for path, value in qmodel.weights.entries.items():
        entries[path] = value.dequantize() if isinstance(value, QTensor) else value
    return build_model(qmodel.config, ModelWeights(entries))


def max_activation_scale(qmodel: QuantizedModel) -> float:
    return max(max(r.input_params.scale, r.output_params.scale) for r in qmodel.activations.values())


__all__ = [
    "CalibrationError",
    "CalibrationSet",
    "LayerRange",
    "QuantParams",
    "QuantizedModel",
    "asymmetric_params",
    "calibrate",
    "dequantize",
    "forward_int8",
    "int8_conv2d",
    "max_activation_scale",
    "quantize_activation",
    "quantize_model",
    "quantize_tensor",
    "quantize_weights",
    "symmetric_params",
]
