"""LiteSR forward graph: intensity-guided depth branch, intensity branch and
the gated residual reconstruction ``y = y_base + sigmoid(g) * r``.

Layer parameters live in a flat store keyed by path, e.g.
``depth.body2.conv1.weight`` or ``gate.depth``. The graph itself is fixed
by :class:`ModelConfig`; :func:`layer_specs` enumerates it.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .tensor import (
    ConvSpec,
    QTensor,
    ShapeError,
    as_tensor,
    bicubic_upsample,
    concat_channels,
    conv2d,
    pixel_shuffle,
    relu,
    sigmoid,
    sobel_gradients,
)

LR_SHAPE = (32, 48)
GATE_KEYS = ("gate.depth", "gate.intensity")
DEFAULT_DILATIONS = (1, 2, 4, 2)

ConvFn = Callable[[str, np.ndarray], np.ndarray]


class WeightValidationError(ValueError):
    """A weight store does not match the layers a config demands."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ModelConfig:
    ch_e: int = 10
    ch_r: int = 5
    ch_dh: int = 6
    ch_ih: int = 4
    n_earb: int = 4
    n_rlfb: int = 4
    upscale: int = 4
    ablate_earb: bool = False
    ablate_rlfb: bool = False
    dilations: tuple = DEFAULT_DILATIONS

    def __post_init__(self):
        if self.upscale not in (4, 8):
            raise ValueError(f"upscale must be 4 or 8, got {self.upscale}")
        for name in ("ch_e", "ch_r", "ch_dh", "ch_ih", "n_earb", "n_rlfb"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError(f"invalid dilation schedule {self.dilations}")

    @property
    def target(self) -> int:
        """Side of the square HR output."""
        return 256 if self.upscale == 4 else 512

    @property
    def n_up_stages(self) -> int:
        return 2 if self.upscale == 4 else 3

    def dilation(self, block: int) -> int:
        return self.dilations[block % len(self.dilations)]


# Channel widths quoted for the smallest deployed model and the 8x model.
SMALLEST = ModelConfig(10, 5, 6, 4)
LARGE_8X = ModelConfig(32, 16, 10, 8, upscale=8)


def _conv3(cin, cout, dilation=1):
    return ConvSpec(cin, cout, (3, 3), dilation=dilation, padding=dilation)


def _conv1(cin, cout):
    return ConvSpec(cin, cout, (1, 1))


def earb_specs(ch: int, dilation: int, plain: bool = False) -> dict[str, ConvSpec]:
    if plain:
        return {f"conv{i}": _conv3(ch, ch) for i in (1, 2, 3)}
    return {"conv1": _conv3(ch, ch, dilation), "conv2": _conv3(ch, ch, dilation), "proj": _conv1(ch, ch)}


def rlfb_specs(ch: int, plain: bool = False) -> dict[str, ConvSpec]:
    if plain:
        return {f"conv{i}": _conv3(ch, ch) for i in (1, 2, 3, 4)}
    specs = {f"conv{i}": _conv3(ch, ch) for i in (1, 2, 3)}
    specs["proj"] = _conv1(ch, ch)
    return specs


def _head_specs(branch: str, cin: int, ch: int, stages: int) -> dict[str, ConvSpec]:
    specs = {}
    for k in range(stages):
        specs[f"{branch}.up{k}"] = _conv3(cin if k == 0 else ch, 4 * ch)
    specs[f"{branch}.out"] = _conv3(ch, 1)
    return specs


def layer_specs(config: ModelConfig) -> dict[str, ConvSpec]:
    """Every convolution in execution order, keyed by layer path."""
    c = config
    specs = {"depth.stem": _conv3(1, c.ch_e), "depth.fuse": _conv1(c.ch_e + 1, c.ch_e)}
    for i in range(c.n_earb):
        for name, s in earb_specs(c.ch_e, c.dilation(i), c.ablate_earb).items():
            specs[f"depth.body{i}.{name}"] = s
    specs.update(_head_specs("depth", c.ch_e, c.ch_dh, c.n_up_stages))
    specs["intensity.stem"] = _conv3(1, c.ch_r)
    for i in range(c.n_rlfb):
        for name, s in rlfb_specs(c.ch_r, c.ablate_rlfb).items():
            specs[f"intensity.body{i}.{name}"] = s
    specs.update(_head_specs("intensity", c.ch_r, c.ch_ih, c.n_up_stages))
    return specs


def layer_resolutions(config: ModelConfig, lr_shape=LR_SHAPE) -> dict[str, tuple[int, int]]:
    """Spatial size at which each convolution runs."""
    h, w = lr_shape
    res = {}
    for name in layer_specs(config):
        part = name.split(".")[1]
        if part.startswith("up"):
            k = int(part[2:])
            res[name] = (h << k, w << k)
        elif part == "out":
            res[name] = (h << config.n_up_stages, w << config.n_up_stages)
        else:
            res[name] = (h, w)
    return res


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    for name, s in layer_specs(config).items():
        shapes[f"{name}.weight"] = s.weight_shape
        if s.has_bias:
            shapes[f"{name}.bias"] = (s.out_channels,)
    for key in GATE_KEYS:
        shapes[key] = ()
    return shapes


@dataclass(frozen=True)
class ModelWeights:
    """Flat parameter store. Gate entries hold the pre-sigmoid logits."""

    entries: Mapping[str, np.ndarray]

    @property
    def gate_logit_depth(self) -> float:
        return float(np.asarray(self.entries["gate.depth"]))

    @property
    def gate_logit_intensity(self) -> float:
        return float(np.asarray(self.entries["gate.intensity"]))

    def replace(self, mapping: Mapping[str, np.ndarray]) -> "ModelWeights":
        new = dict(self.entries)
        new.update(mapping)
        return ModelWeights(new)


def validate_weights(config: ModelConfig, weights: ModelWeights, extra_allowed=()) -> None:
    expected = expected_shapes(config)
    for path, shape in expected.items():
        if path not in weights.entries:
            raise WeightValidationError(path, "missing entry")
        value = weights.entries[path]
        got = value.shape if isinstance(value, QTensor) else np.shape(value)
        if tuple(got) != tuple(shape):
            raise WeightValidationError(path, f"shape {tuple(got)} != expected {tuple(shape)}")
    for path in weights.entries:
        if path not in expected and path not in extra_allowed:
            raise WeightValidationError(path, "unexpected entry")


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def init_weights(config: ModelConfig, seed: int = 0, gate_init: float = 0.1) -> ModelWeights:
    """Seeded uniform [-0.1, 0.1] weights; gates start at ``logit(gate_init)``."""
    rng = np.random.default_rng(seed)
    entries = {}
    for path, shape in expected_shapes(config).items():
        if path in GATE_KEYS:
            entries[path] = np.float32(logit(gate_init))
        else:
            entries[path] = rng.uniform(-0.1, 0.1, size=shape).astype(np.float32)
    return ModelWeights(entries)


def zero_residual_weights(weights: ModelWeights) -> ModelWeights:
    """Zero the residual output layers so both branches predict r = 0."""
    updates = {}
    for path, value in weights.entries.items():
        if path.startswith(("depth.out.", "intensity.out.")):
            updates[path] = np.zeros_like(value)
    return weights.replace(updates)


@dataclass(frozen=True)
class SRResult:
    depth_hr: np.ndarray
    intensity_hr: np.ndarray
    base_depth: np.ndarray
    base_intensity: np.ndarray
    residual_depth: np.ndarray
    residual_intensity: np.ndarray


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    weights: ModelWeights
    specs: Mapping[str, ConvSpec] = field(repr=False, default=None)

    def forward(self, depth_lr, intensity_lr) -> SRResult:
        return forward(self, depth_lr, intensity_lr)

    def conv(self, name: str, x: np.ndarray) -> np.ndarray:
        return conv2d(x, self.weights.entries[f"{name}.weight"], self.weights.entries.get(f"{name}.bias"),
                      self.specs[name])


def build_model(config: ModelConfig, weights: ModelWeights) -> Model:
    validate_weights(config, weights)
    for path, value in weights.entries.items():
        if isinstance(value, QTensor):
            raise WeightValidationError(path, "INT8 entry in an FP32 model; use the quantizer")
    frozen = {}
    for path, value in weights.entries.items():
        arr = np.array(value, dtype=np.float32)
        arr.setflags(write=False)
        frozen[path] = arr
    specs = MappingProxyType(dict(layer_specs(config)))
    return Model(config, ModelWeights(MappingProxyType(frozen)), specs)


def guidance_mask(intensity_lr) -> np.ndarray:
    """Sobel magnitude of the LR intensity, min-max scaled to [0, 1] per frame."""
    gx, gy = sobel_gradients(as_tensor(intensity_lr))
    mag = np.sqrt(gx * gx + gy * gy)
    lo = mag.min(axis=(1, 2, 3), keepdims=True)
    span = mag.max(axis=(1, 2, 3), keepdims=True) - lo
    out = np.where(span > 0, (mag - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out.astype(np.float32)


def _block_conv(weights: Mapping[str, np.ndarray], specs: Mapping[str, ConvSpec]) -> ConvFn:
    def conv(name, x):
        return conv2d(x, weights[f"{name}.weight"], weights.get(f"{name}.bias"), specs[name])
    return conv


def _earb(conv: ConvFn, prefix: str, x: np.ndarray, plain: bool) -> np.ndarray:
    if plain:
        y = relu(conv(f"{prefix}conv1", x))
        y = relu(conv(f"{prefix}conv2", y))
        return conv(f"{prefix}conv3", y)
    y = relu(conv(f"{prefix}conv1", x))
    y = conv(f"{prefix}conv2", y)
    return x + conv(f"{prefix}proj", y)


def _rlfb(conv: ConvFn, prefix: str, x: np.ndarray, plain: bool) -> np.ndarray:
    if plain:
        y = x
        for i in (1, 2, 3):
            y = relu(conv(f"{prefix}conv{i}", y))
        return conv(f"{prefix}conv4", y)
    y = x
    for i in (1, 2, 3):
        y = relu(conv(f"{prefix}conv{i}", y))
    return x + conv(f"{prefix}proj", y)


def earb_block(features, weights: Mapping[str, np.ndarray], dilation: int = 1, plain: bool = False):
    """One edge-aware residual block.

    ``weights`` holds ``conv1/conv2/proj`` entries (``conv1..3`` when
    ``plain``), each with ``.weight`` and ``.bias``.
    """
    x = as_tensor(features)
    ch = x.shape[1]
    expected = weights["conv1.weight"].shape[1]
    if ch != expected:
        raise ShapeError(f"EARB expects {expected} channels, got {ch}")
    return _earb(_block_conv(weights, earb_specs(ch, dilation, plain)), "", x, plain)


def rlfb_block(features, weights: Mapping[str, np.ndarray], plain: bool = False):
    """One residual local feature block (``conv1..3`` + ``proj``)."""
    x = as_tensor(features)
    ch = x.shape[1]
    expected = weights["conv1.weight"].shape[1]
    if ch != expected:
        raise ShapeError(f"RLFB expects {expected} channels, got {ch}")
    return _rlfb(_block_conv(weights, rlfb_specs(ch, plain)), "", x, plain)


def _head(conv: ConvFn, branch: str, x: np.ndarray, stages: int, target: int) -> np.ndarray:
    for k in range(stages):
        x = relu(pixel_shuffle(conv(f"{branch}.up{k}", x), 2))
    r = conv(f"{branch}.out", x)
    return bicubic_upsample(r, target, target)


def _check_inputs(depth_lr, intensity_lr):
    d = as_tensor(depth_lr, "depth_lr")
    i = as_tensor(intensity_lr, "intensity_lr")
    for name, t in (("depth_lr", d), ("intensity_lr", i)):
        if t.shape[1] != 1 or t.shape[2:] != LR_SHAPE:
            raise ShapeError(f"{name} must be (n, 1, 32, 48), got {t.shape}")
    if d.shape[0] != i.shape[0]:
        raise ShapeError(f"batch mismatch: {d.shape[0]} depth vs {i.shape[0]} intensity frames")
    return d, i


def run_graph(config: ModelConfig, conv: ConvFn, gates: tuple[float, float], depth_lr, intensity_lr) -> SRResult:
    """Execute the network with a pluggable convolution.

    ``conv(name, x)`` must return the pre-activation output of layer
    ``name``; the FP32, calibration and INT8 paths differ only there.
    """
    d, i = _check_inputs(depth_lr, intensity_lr)
    c = config
    t = c.target

    f = relu(conv("depth.stem", d))
    f = relu(conv("depth.fuse", concat_channels(f, guidance_mask(i))))
    for b in range(c.n_earb):
        f = _earb(conv, f"depth.body{b}.", f, c.ablate_earb)
    res_d = _head(conv, "depth", f, c.n_up_stages, t)

    g = relu(conv("intensity.stem", i))
    for b in range(c.n_rlfb):
        g = _rlfb(conv, f"intensity.body{b}.", g, c.ablate_rlfb)
    res_i = _head(conv, "intensity", g, c.n_up_stages, t)

    base_d = bicubic_upsample(d, t, t)
    base_i = bicubic_upsample(i, t, t)
    gate_d, gate_i = (np.float32(sigmoid(v)) for v in gates)
    return SRResult(
        depth_hr=base_d + gate_d * res_d,
        intensity_hr=base_i + gate_i * res_i,
        base_depth=base_d,
        base_intensity=base_i,
        residual_depth=res_d,
        residual_intensity=res_i,
    )


def forward(model: Model, depth_lr, intensity_lr) -> SRResult:
    w = model.weights
    return run_graph(model.config, model.conv, (w.gate_logit_depth, w.gate_logit_intensity),
                     depth_lr, intensity_lr)


def count_macs(config: ModelConfig, lr_shape=LR_SHAPE) -> int:
    """Multiply-accumulates of all convolutions for one frame pair."""
    res = layer_resolutions(config, lr_shape)
    total = 0
    for name, s in layer_specs(config).items():
        h, w = res[name]
        kh, kw = s.kernel
        total += h * w * s.out_channels * s.in_channels * kh * kw
    return total


def count_params(model) -> dict:
    """Parameter count, storage bytes at the stored dtypes, and MACs per forward."""
    params = 0
    nbytes = 0
    for value in model.weights.entries.values():
        arr = value.data if isinstance(value, QTensor) else np.asarray(value)
        params += arr.size
        nbytes += arr.size * arr.dtype.itemsize
    return {"params": int(params), "bytes": int(nbytes), "macs": count_macs(model.config)}
