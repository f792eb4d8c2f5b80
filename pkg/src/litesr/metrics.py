"""Image quality metrics and the training losses, evaluated forward only.

All functions take 2-D images or single-channel ``(n, 1, h, w)`` tensors.
Batched inputs are flattened into one population (means and standard
deviations run over every pixel of every frame).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .tensor import ShapeError, _correlate3x3, sobel_gradients

__all__ = [
    "MetricReport",
    "LossWeights",
    "psnr",
    "ssim",
    "ssim_maps",
    "ms_ssim",
    "gmsd",
    "ngmsd",
    "rmse",
    "delta_threshold",
    "laplacian_variance",
    "depth_smoothness",
    "charbonnier",
    "tv_loss",
    "sobel_edge_loss",
    "sobel_grad_loss",
    "depth_loss",
    "intensity_loss",
    "total_loss",
    "UndefinedMetricError",
    "MS_SSIM_WEIGHTS",
]

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
GMSD_C = 170.0
LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
PREWITT_X = np.array([[1, 0, -1], [1, 0, -1], [1, 0, -1]], dtype=np.float64) / 3.0
PREWITT_Y = PREWITT_X.T.copy()


class UndefinedMetricError(ValueError):
    """The metric has no valid support (e.g. every pixel was excluded)."""


def _planes(x) -> np.ndarray:
    """Return ``x`` as a stack of 2-D float64 planes, shape (k, h, w)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise ShapeError(f"expected single-channel images, got {x.shape[1]} channels")
        return x[:, 0]
    if x.ndim == 3:
        return x
    raise ShapeError(f"expected a 2-D image or (n, 1, h, w) tensor, got shape {x.shape}")


def _sobel(planes: np.ndarray):
    gx, gy = sobel_gradients(planes[:, None])
    return gx[:, 0], gy[:, 0]


def _pair(a, b):
    a, b = _planes(a), _planes(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of each plane in ``x`` with 1-D kernel ``g``."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ g


def ssim_maps(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03):
    """Local luminance and contrast-structure maps over an 11x11 Gaussian window."""
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gaussian_window()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    return lum, cs


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM (Gaussian window 11, sigma 1.5, K1 0.01, K2 0.03, valid region)."""
    lum, cs = ssim_maps(a, b, data_range)
    return float(np.mean(lum * cs))


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim_scales(shape) -> int:
    """Largest scale count <= 5 whose coarsest level still fits the SSIM window."""
    m = min(shape[-2:])
    n = 0
    while n < len(MS_SSIM_WEIGHTS) and (m >> n) >= SSIM_WINDOW:
        n += 1
    return n


def ms_ssim(a, b, data_range: float = 1.0, weights=None) -> float:
    """Multi-scale SSIM with 2x average pooling between scales.

    Images too small for five scales use the leading exponents, rescaled to
    sum to one. Passing ``weights`` fixes the scale count to ``len(weights)``
    and uses them verbatim. Negative per-scale terms are clamped to zero
    before exponentiation.
    """
    a, b = _pair(a, b)
    if weights is None:
        n = ms_ssim_scales(a.shape)
        if n == 0:
            raise ShapeError(f"image {a.shape[-2:]} too small for MS-SSIM")
        w = np.asarray(MS_SSIM_WEIGHTS[:n])
        w = w / w.sum()
    else:
        w = np.asarray(weights, dtype=np.float64)
        n = w.size
        if min(a.shape[-2:]) >> (n - 1) < SSIM_WINDOW:
            raise ShapeError(f"image {a.shape[-2:]} too small for {n} MS-SSIM scales")
    result = 1.0
    for j in range(n):
        lum, cs = ssim_maps(a, b, data_range)
        if j == n - 1:
            term = float(np.mean(lum * cs))
        else:
            term = float(np.mean(cs))
            a, b = _avg_pool2(a), _avg_pool2(b)
        result *= max(term, 0.0) ** w[j]
    return float(result)


def _gms_map(a: np.ndarray, b: np.ndarray, c: float) -> np.ndarray:
    ma = np.hypot(_correlate3x3(a, PREWITT_X), _correlate3x3(a, PREWITT_Y))
    mb = np.hypot(_correlate3x3(b, PREWITT_X), _correlate3x3(b, PREWITT_Y))
    return (2 * ma * mb + c) / (ma * ma + mb * mb + c)


def gmsd(a, b, data_range: float = 1.0) -> float:
    """Gradient magnitude similarity deviation.

    Images are rescaled so ``data_range`` maps to 255, then Prewitt
    magnitudes (zero padded) feed the similarity map with c = 170. The
    result is the population standard deviation of that map.
    """
    a, b = _pair(a, b)
    s = 255.0 / data_range
    return float(np.std(_gms_map(a * s, b * s, GMSD_C)))


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def ngmsd(a, b) -> float:
    """GMSD after min-max normalizing each image to [0, 1]."""
    a, b = _pair(a, b)
    return gmsd(_minmax(a), _minmax(b), data_range=1.0)


def delta_threshold(pred, gt, t: float = 1.25) -> float:
    """Fraction of pixels with ``max(pred/gt, gt/pred) < t``.

    Pixels where ``gt <= 0`` are excluded. Non-positive predictions on valid
    pixels count as failures.
    """
    pred, gt = _pair(pred, gt)
    valid = gt > 0
    if not valid.any():
        raise UndefinedMetricError("no pixel with positive ground truth")
    p, g = pred[valid], gt[valid]
    ok = p > 0
    ratio = np.full(p.shape, np.inf)
    ratio[ok] = np.maximum(p[ok] / g[ok], g[ok] / p[ok])
    return float(np.mean(ratio < t))


def laplacian_variance(img) -> float:
    """Variance of the 4-neighbour Laplacian over the valid (unpadded) interior."""
    x = _planes(img)
    if min(x.shape[-2:]) < 3:
        raise ShapeError(f"Laplacian variance needs at least 3x3 images, got {x.shape[-2:]}")
    return float(np.var(_correlate3x3(x, LAPLACIAN)[..., 1:-1, 1:-1]))


def depth_smoothness(depth, mask=None) -> float:
    """Mean squared Sobel gradient magnitude over the valid interior.

    The one-pixel border is skipped so zero padding does not register as an
    edge. ``mask`` (same shape as ``depth``) restricts the average further.
    """
    x = _planes(depth)
    if min(x.shape[-2:]) < 3:
        raise ShapeError(f"depth smoothness needs at least 3x3 maps, got {x.shape[-2:]}")
    gx, gy = _sobel(x)
    energy = (gx * gx + gy * gy)[..., 1:-1, 1:-1]
    if mask is None:
        return float(np.mean(energy))
    m = _planes(mask).astype(bool)
    if m.shape != x.shape:
        raise ShapeError(f"mask shape {m.shape} != depth shape {x.shape}")
    m = m[..., 1:-1, 1:-1]
    if not m.any():
        raise UndefinedMetricError("empty homogeneous-region mask")
    return float(np.mean(energy[m]))


def charbonnier(pred, gt, eps: float = 1e-3) -> float:
    if eps <= 0:
        raise ValueError("eps must be positive")
    pred, gt = _pair(pred, gt)
    d2 = (pred - gt) ** 2
    # eps + mean(sqrt(d^2 + eps^2) - eps), rearranged to avoid cancellation;
    # identical inputs give exactly eps.
    return float(eps + np.mean(d2 / (np.sqrt(d2 + eps * eps) + eps)))


def tv_loss(img) -> float:
    """Anisotropic total variation with forward differences, divided by pixel count."""
    x = _planes(img)
    dx = np.abs(np.diff(x, axis=-1)).sum()
    dy = np.abs(np.diff(x, axis=-2)).sum()
    return float((dx + dy) / x.size)


def sobel_edge_loss(pred, gt) -> float:
    """Mean absolute difference of Sobel gradient magnitudes."""
    pred, gt = _pair(pred, gt)
    mp = np.hypot(*_sobel(pred))
    mg = np.hypot(*_sobel(gt))
    return float(np.mean(np.abs(mp - mg)))


def sobel_grad_loss(pred, gt) -> float:
    """Per-pixel L1 distance between (gx, gy) pairs, averaged over pixels."""
    pred, gt = _pair(pred, gt)
    pgx, pgy = _sobel(pred)
    ggx, ggy = _sobel(gt)
    return float(np.mean(np.abs(pgx - ggx) + np.abs(pgy - ggy)))


@dataclass(frozen=True)
class LossWeights:
    w_d: float = 0.05
    w_i: float = 0.1
    w_ssim: float = 0.2
    w_edge: float = 0.2
    w_tv: float = 1e-5
    w_ms_ssim: float = 0.15
    w_grad: float = 0.02
    eps: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


DEFAULT_LOSS_WEIGHTS = LossWeights()


def depth_loss(pred, gt, weights: LossWeights = DEFAULT_LOSS_WEIGHTS, data_range: float = 1.0,
               tv_on: str = "error") -> float:
    """Charbonnier + SSIM + Sobel edge + TV terms for the depth branch.

    ``tv_on="error"`` applies the TV term to ``pred - gt`` so identical
    inputs give exactly the Charbonnier floor; ``"prediction"`` applies it
    to the predicted map itself.
    """
    pred, gt = _pair(pred, gt)
    if tv_on == "error":
        tv = tv_loss(pred - gt)
    elif tv_on == "prediction":
        tv = tv_loss(pred)
    else:
        raise ValueError(f"tv_on must be 'error' or 'prediction', got {tv_on!r}")
    return (charbonnier(pred, gt, weights.eps)
            + weights.w_ssim * (1.0 - ssim(pred, gt, data_range))
            + weights.w_edge * sobel_edge_loss(pred, gt)
            + weights.w_tv * tv)


def intensity_loss(pred, gt, weights: LossWeights = DEFAULT_LOSS_WEIGHTS, data_range: float = 1.0) -> float:
    return (charbonnier(pred, gt, weights.eps)
            + weights.w_ms_ssim * (1.0 - ms_ssim(pred, gt, data_range))
            + weights.w_grad * sobel_grad_loss(pred, gt))


def total_loss(d_pred, d_gt, i_pred, i_gt, weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
               data_range: float = 1.0, tv_on: str = "error") -> float:
    return (weights.w_d * depth_loss(d_pred, d_gt, weights, data_range, tv_on)
            + weights.w_i * intensity_loss(i_pred, i_gt, weights, data_range))


@dataclass
class MetricReport:
    data_range: float = 1.0
    psnr_db: float | None = None
    ssim: float | None = None
    ms_ssim: float | None = None
    gmsd: float | None = None
    ngmsd: float | None = None
    rmse: float | None = None
    delta_125: float | None = None
    lv: float | None = None
    depth_smoothness: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        # JSON has no infinity literal; identical images report PSNR as the string "inf".
        if d["psnr_db"] is not None and math.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        if d.get("psnr_db") == "inf":
            d["psnr_db"] = math.inf
        return cls(**d)


def evaluate(pred, gt, modality: str, data_range: float = 1.0) -> MetricReport:
    """Full-reference report for one image pair, as the eval tables use it."""
    rep = MetricReport(data_range=data_range)
    rep.psnr_db = psnr(pred, gt, data_range)
    rep.rmse = rmse(pred, gt)
    if modality == "depth":
        rep.ssim = ssim(pred, gt, data_range)
        try:
            rep.delta_125 = delta_threshold(pred, gt)
        except UndefinedMetricError:
            rep.delta_125 = None
        rep.depth_smoothness = depth_smoothness(pred)
    elif modality == "intensity":
        rep.ms_ssim = ms_ssim(pred, gt, data_range)
        rep.gmsd = gmsd(pred, gt, data_range)
        rep.ngmsd = ngmsd(pred, gt)
        rep.lv = laplacian_variance(pred)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return rep
