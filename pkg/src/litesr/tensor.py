"""Rank-4 NCHW tensor helpers and the numeric kernels the network is built from.

A "tensor" here is a plain ``numpy.ndarray`` of shape ``(n, c, h, w)`` in
C order. FP32 tensors are ``float32`` arrays; INT8 payloads are carried by
:class:`QTensor`, which pairs an ``int8`` array with its scale and zero point.

Convolution is cross-correlation (no kernel flip), so exported weights from
the usual deep learning frameworks load without flipping.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "ShapeError",
    "DTypeError",
    "QTensor",
    "ConvSpec",
    "as_tensor",
    "conv2d",
    "conv_output_size",
    "pixel_shuffle",
    "space_to_depth",
    "bicubic_upsample",
    "bicubic_matrix",
    "activation",
    "relu",
    "sigmoid",
    "concat_channels",
    "sobel_gradients",
    "SOBEL_X",
    "SOBEL_Y",
]

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


class ShapeError(ValueError):
    """Raised when tensor dimensions do not fit an operation."""


class DTypeError(TypeError):
    """Raised when an FP32 kernel receives a non-FP32 payload."""


@dataclass(frozen=True)
class QTensor:
    """INT8 (or INT32 bias) payload with its affine quantization parameters.

    ``real = scale * (data - zero_point)``.
    """

    data: np.ndarray
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"quantized tensor scale must be positive, got {self.scale}")
        if self.data.dtype not in (np.int8, np.int32):
            raise DTypeError(f"QTensor payload must be int8 or int32, got {self.data.dtype}")

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return (self.scale * (self.data.astype(np.float64) - self.zero_point)).astype(np.float32)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.dilation) < 1:
            raise ShapeError(f"invalid convolution geometry: {self}")
        if self.padding < 0:
            raise ShapeError(f"negative padding: {self.padding}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return (
            conv_output_size(h, kh, self.stride, self.dilation, self.padding),
            conv_output_size(w, kw, self.stride, self.dilation, self.padding),
        )


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    span = size + 2 * padding - dilation * (k - 1) - 1
    if span < 0 or span % stride:
        raise ShapeError(
            f"input extent {size} with kernel {k}, dilation {dilation}, padding {padding}, "
            f"stride {stride} does not give a positive integer output size"
        )
    return span // stride + 1


def as_tensor(x, name: str = "input") -> np.ndarray:
    """Validate ``x`` as an FP32 rank-4 tensor and return it as a float32 array.

    2-D arrays are promoted to ``(1, 1, h, w)``. Integer or quantized payloads
    are rejected; they belong to the quantizer.
    """
    if isinstance(x, QTensor):
        raise DTypeError(f"{name}: INT8 payload given to an FP32 kernel")
    x = np.asarray(x)
    if x.dtype.kind not in "f":
        raise DTypeError(f"{name}: expected floating point data, got {x.dtype}")
    if x.ndim == 2:
        x = x[None, None]
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected a rank-4 (n, c, h, w) tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    # Empty tensors are all-zero; zero channels alone are allowed so concat has an identity.
    if x.size == 0 and not (n == c == h == w == 0) and not (c == 0 and min(n, h, w) > 0):
        raise ShapeError(f"{name}: mixed zero/non-zero dimensions {x.shape}")
    return np.ascontiguousarray(x, dtype=np.float32)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int, padding: int):
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, dilation, padding)
    ow = conv_output_size(w, kw, stride, dilation, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, :, i, j] = x[:, :, r0:r0 + stride * (oh - 1) + 1:stride,
                                 c0:c0 + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def conv2d(x, weights, bias=None, spec: ConvSpec | None = None) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    Parameters
    ----------
    x : array_like, shape (n, c_in, h, w)
    weights : array_like, shape (c_out, c_in, kh, kw)
    bias : array_like, shape (c_out,), optional
    spec : ConvSpec, optional
        Geometry. When omitted, stride 1 / dilation 1 / padding 0 is assumed
        and the channel counts are taken from ``weights``.

    Returns
    -------
    ndarray, shape (n, c_out, oh, ow), float32
    """
    x = as_tensor(x)
    if isinstance(weights, QTensor):
        raise DTypeError("conv2d weights are INT8; use the quantizer's integer path")
    weights = np.asarray(weights, dtype=np.float32)
    if weights.ndim != 4:
        raise ShapeError(f"weights must be rank 4, got shape {weights.shape}")
    if spec is None:
        spec = ConvSpec(weights.shape[1], weights.shape[0], weights.shape[2:], has_bias=bias is not None)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, convolution expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights shape {weights.shape} != expected {spec.weight_shape}")
    kh, kw = spec.kernel
    cols, oh, ow = _im2col(x, kh, kw, spec.stride, spec.dilation, spec.padding)
    wmat = weights.reshape(spec.out_channels, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32).reshape(-1)
        if bias.shape[0] != spec.out_channels:
            raise ShapeError(f"bias length {bias.shape[0]} != out_channels {spec.out_channels}")
        out += bias[None, :, None]
    return out.reshape(x.shape[0], spec.out_channels, oh, ow)


def pixel_shuffle(x, r: int) -> np.ndarray:
    """Rearrange ``(n, c*r*r, h, w)`` into ``(n, c, h*r, w*r)``."""
    x = as_tensor(x)
    if r < 1:
        raise ShapeError(f"upscale factor must be positive, got {r}")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"channel count {c} not divisible by r^2 = {r * r}")
    oc = c // (r * r)
    y = x.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, oc, h * r, w * r))


def space_to_depth(x, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial size {(h, w)} not divisible by {r}")
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * r * r, h // r, w // r))


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def bicubic_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Dense ``(out_size, in_size)`` resampling matrix along one axis.

    Half-pixel centres, Catmull-Rom kernel (a = -0.5), taps clamped at the
    borders. Rows sum to one.
    """
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    for k in range(-1, 3):
        wk = _cubic(frac - k)
        idx = np.clip(base + k, 0, in_size - 1)
        np.add.at(m, (rows, idx), wk)
    m.setflags(write=False)
    return m


def bicubic_upsample(x, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of every (n, c) plane to ``(out_h, out_w)``."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {(out_h, out_w)}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"bicubic resampling needs at least 2x2 input, got {(h, w)}")
    mh = bicubic_matrix(h, out_h)
    mw = bicubic_matrix(w, out_w)
    y = np.einsum("oh,nchw,pw->ncop", mh, x.astype(np.float64), mw, optimize=True)
    return y.astype(np.float32)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), np.float32(0))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # Split by sign so large |x| neither overflows nor loses the tail.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(x, kind: str = "relu") -> np.ndarray:
    x = as_tensor(x)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x).astype(np.float32)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def concat_channels(a, b) -> np.ndarray:
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def _correlate3x3(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)])
    out = np.zeros(img.shape, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            if k[i, j]:
                out += k[i, j] * p[..., i:i + h, j:j + w]
    return out


def sobel_gradients(x) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses with zero padding.

    Accepts a single-channel tensor or a bare 2-D image; returns float64
    arrays of the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4 and x.shape[1] != 1:
        raise ShapeError(f"Sobel gradients need single-channel input, got {x.shape[1]} channels")
    if x.ndim not in (2, 4):
        raise ShapeError(f"expected a 2-D image or (n, 1, h, w) tensor, got shape {x.shape}")
    # Separable form, difference first, so constant regions give exact zeros.
    p = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)])
    dx = p[..., :, 2:] - p[..., :, :-2]
    dy = p[..., 2:, :] - p[..., :-2, :]
    gx = dx[..., :-2, :] + 2.0 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = dy[..., :, :-2] + 2.0 * dy[..., :, 1:-1] + dy[..., :, 2:]
    return gx, gy
