"""Sensor defect correction for the 32x48 SPAD frames.

Hot pixels are found once from flat-field captures (temporal mean above a
photon-count threshold) and patched in every later frame from their clean
3x3 neighbours. Response non-uniformity is a per-pixel multiplicative gain.
"""

from __future__ import annotations

import base64
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 250.0
GAIN_BAND = (0.5, 2.0)
BUNDLE_VERSION = 1


class CalibrationDataError(ValueError):
    """Calibration inputs or stored maps are unusable."""


class DegenerateMaskWarning(UserWarning):
    """Every pixel was flagged hot; the threshold is probably wrong."""


class GainBandWarning(UserWarning):
    """A non-uniformity gain lies outside the (0.5, 2.0) sanity band."""


@dataclass(frozen=True)
class HotPixelMask:
    mask: np.ndarray
    threshold_counts: float
    source_mean_frame: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class NonUniformityMap:
    depth_gain: np.ndarray
    intensity_gain: np.ndarray

    def __post_init__(self):
        for name in ("depth_gain", "intensity_gain"):
            g = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(g <= 0):
                raise CalibrationDataError(f"{name} has non-positive entries")
            lo, hi = GAIN_BAND
            bad = int(np.count_nonzero((g <= lo) | (g >= hi)))
            if bad:
                warnings.warn(f"{name}: {bad} gains outside {GAIN_BAND}", GainBandWarning, stacklevel=3)

    @classmethod
    def identity(cls, shape=(32, 48)) -> "NonUniformityMap":
        return cls(np.ones(shape), np.ones(shape))

    @classmethod
    def random(cls, rng: np.random.Generator, shape=(32, 48), spread: float = 0.1) -> "NonUniformityMap":
        """Synthetic map with gains drawn from ``1 +- spread``."""
        return cls(1.0 + rng.uniform(-spread, spread, shape), 1.0 + rng.uniform(-spread, spread, shape))


def _frame2d(frame) -> np.ndarray:
    x = np.asarray(frame)
    if x.ndim == 4 and x.shape[:2] == (1, 1):
        x = x[0, 0]
    if x.ndim != 2:
        raise ShapeError(f"expected a single 2-D frame, got shape {x.shape}")
    return x


def detect_hot_pixels(flat_frames, threshold: float = DEFAULT_THRESHOLD) -> HotPixelMask:
    """Flag pixels whose temporal mean over flat-field frames exceeds ``threshold``."""
    frames = [_frame2d(f).astype(np.float64) for f in flat_frames]
    if not frames:
        raise CalibrationDataError("no flat-field frames given")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ShapeError("flat-field frames differ in size")
    mean = np.mean(frames, axis=0)
    mask = mean > threshold
    if mask.all():
        warnings.warn(f"all {mask.size} pixels exceed threshold {threshold}", DegenerateMaskWarning, stacklevel=2)
    log.info("hot pixel detection: %d of %d flagged at %.1f counts", mask.sum(), mask.size, threshold)
    return HotPixelMask(mask, float(threshold), mean)


def compensate_hot_pixels(frame, mask: HotPixelMask | np.ndarray, method: str = "median") -> np.ndarray:
    """Replace each flagged pixel from its unflagged 3x3 neighbours.

    ``method`` is ``"median"`` (default) or ``"mean"``. A pixel whose whole
    neighbourhood is flagged falls back to the same statistic over every
    unflagged pixel in the frame. Clean pixels are returned untouched.
    """
    if method == "median":
        stat = np.median
    elif method == "mean":
        stat = np.mean
    else:
        raise ValueError(f"method must be 'median' or 'mean', got {method!r}")
    src = np.asarray(frame)
    img = _frame2d(src)
    m = np.asarray(mask.mask if isinstance(mask, HotPixelMask) else mask, dtype=bool)
    if m.shape != img.shape:
        raise ShapeError(f"mask {m.shape} does not match frame {img.shape}")
    out = img.copy()
    if not m.any():
        return out.reshape(src.shape)
    h, w = img.shape
    clean = img[~m]
    fallback = stat(clean) if clean.size else 0.0
    # Gather the 8 neighbours of every pixel; missing (off-frame) or flagged ones become NaN.
    vals = np.pad(img.astype(np.float64), 1, constant_values=np.nan)
    bad = np.pad(m, 1, constant_values=True)
    rows, cols = np.nonzero(m)
    neigh = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            v = vals[rows + 1 + di, cols + 1 + dj]
            neigh.append(np.where(bad[rows + 1 + di, cols + 1 + dj], np.nan, v))
    neigh = np.stack(neigh, axis=1)
    have = ~np.all(np.isnan(neigh), axis=1)
    repl = np.full(rows.shape, fallback, dtype=np.float64)
    if have.any():
        nan_stat = np.nanmedian if method == "median" else np.nanmean
        repl[have] = nan_stat(neigh[have], axis=1)
    out[rows, cols] = repl.astype(out.dtype) if np.issubdtype(out.dtype, np.floating) else np.rint(repl).astype(out.dtype)
    return out.reshape(src.shape)


def apply_nonuniformity(frame, gain, direction: str = "correct") -> np.ndarray:
    """Multiply by ``gain`` (``"correct"``) or divide by it (``"corrupt"``)."""
    x = np.asarray(frame, dtype=np.float64)
    g = np.asarray(gain, dtype=np.float64)
    if np.any(g <= 0):
        raise CalibrationDataError("gain map has non-positive entries")
    if x.shape[-2:] != g.shape[-2:]:
        raise ShapeError(f"gain {g.shape} does not match frame {x.shape}")
    if direction == "correct":
        return x * g
    if direction == "corrupt":
        return x / g
    raise ValueError(f"direction must be 'correct' or 'corrupt', got {direction!r}")


def estimate_nonuniformity(flat_depth_frames, flat_intensity_frames,
                           hot: HotPixelMask | None = None) -> NonUniformityMap:
    """Gain maps from flat-target captures: ``gain = global mean / pixel mean``.

    Hot pixels are excluded from the global mean and get unit gain.
    """
    gains = []
    for name, frames in (("depth", flat_depth_frames), ("intensity", flat_intensity_frames)):
        stack = [_frame2d(f).astype(np.float64) for f in frames]
        if not stack:
            raise CalibrationDataError(f"no flat {name} frames given")
        mean = np.mean(stack, axis=0)
        ok = np.ones(mean.shape, dtype=bool) if hot is None else ~hot.mask
        if mean.shape != ok.shape:
            raise ShapeError(f"flat {name} frames {mean.shape} do not match the hot-pixel mask {ok.shape}")
        ok &= mean > 0
        if not ok.any():
            raise CalibrationDataError(f"flat {name} frames have no usable pixels")
        gain = np.ones_like(mean)
        gain[ok] = mean[ok].mean() / mean[ok]
        gains.append(gain)
    return NonUniformityMap(*gains)


@dataclass(frozen=True)
class CalibrationBundle:
    hot_pixels: HotPixelMask
    nonuniformity: NonUniformityMap | None = None

    def save(self, path) -> None:
        """JSON header with base64 little-endian payloads."""
        hp = self.hot_pixels
        h, w = hp.mask.shape
        doc = {
            "version": BUNDLE_VERSION,
            "height": h,
            "width": w,
            "threshold_counts": hp.threshold_counts,
            "statistics": {
                "hot_pixels": hp.count,
                "mean_counts": float(hp.source_mean_frame.mean()),
                "max_counts": float(hp.source_mean_frame.max()),
            },
            "hot_mask": _b64(np.packbits(hp.mask.ravel())),
            "mean_frame": _b64(hp.source_mean_frame.astype("<f4")),
        }
        if self.nonuniformity is not None:
            doc["depth_gain"] = _b64(np.asarray(self.nonuniformity.depth_gain, dtype="<f4"))
            doc["intensity_gain"] = _b64(np.asarray(self.nonuniformity.intensity_gain, dtype="<f4"))
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path) -> "CalibrationBundle":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != BUNDLE_VERSION:
            raise CalibrationDataError(f"unsupported calibration bundle version {doc.get('version')}")
        h, w = doc["height"], doc["width"]
        bits = np.frombuffer(base64.b64decode(doc["hot_mask"]), dtype=np.uint8)
        mask = np.unpackbits(bits)[: h * w].astype(bool).reshape(h, w)
        mean = _unb64(doc["mean_frame"], "<f4", (h, w)).astype(np.float64)
        nu = None
        if "depth_gain" in doc:
            nu = NonUniformityMap(_unb64(doc["depth_gain"], "<f4", (h, w)).astype(np.float64),
                                  _unb64(doc["intensity_gain"], "<f4", (h, w)).astype(np.float64))
        return cls(HotPixelMask(mask, float(doc["threshold_counts"]), mean), nu)


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")


def _unb64(text: str, dtype: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype=dtype).reshape(shape)
