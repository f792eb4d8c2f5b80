"""Synthetic LR/HR pair generation.

HR depth (metres) and intensity (photon counts) images are area-averaged
down to the 32x48 sensor footprint and bicubically resampled to a square
HR target. LR frames can be corrupted with a response non-uniformity map,
normalized with dataset statistics and flip-augmented.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import calibration
from .pgm import read_pgm, write_pgm
from .tensor import ShapeError, bicubic_upsample

log = logging.getLogger(__name__)

LR_SHAPE = (32, 48)
TARGETS = (256, 512)
AUGMENTATIONS = ("none", "hflip", "vflip", "hvflip")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetStats:
    mean_depth: float
    std_depth: float
    mean_intensity: float
    std_intensity: float

    def __post_init__(self):
        if not (self.std_depth > 0 and self.std_intensity > 0):
            raise DataError("dataset standard deviations must be strictly positive")

    @classmethod
    def compute(cls, samples: Sequence["PairSample"]) -> "DatasetStats":
        """Statistics of the LR inputs across ``samples``."""
        if not samples:
            raise DataError("cannot compute statistics of an empty set")
        d = np.concatenate([np.ravel(s.lr_depth) for s in samples]).astype(np.float64)
        i = np.concatenate([np.ravel(s.lr_intensity) for s in samples]).astype(np.float64)
        return cls(float(d.mean()), float(d.std()), float(i.mean()), float(i.std()))

    def to_dict(self) -> dict:
        return {"mean_depth": self.mean_depth, "std_depth": self.std_depth,
                "mean_intensity": self.mean_intensity, "std_intensity": self.std_intensity}


@dataclass(frozen=True)
class PairSample:
    lr_depth: np.ndarray
    lr_intensity: np.ndarray
    hr_depth: np.ndarray
    hr_intensity: np.ndarray
    scene_id: str = ""
    augmentation: str = "none"

    def __post_init__(self):
        for name in ("lr_depth", "lr_intensity"):
            if np.shape(getattr(self, name)) != LR_SHAPE:
                raise DataError(f"{name} must be {LR_SHAPE}, got {np.shape(getattr(self, name))}")
        hd, hi = np.shape(self.hr_depth), np.shape(self.hr_intensity)
        if hd != hi or len(hd) != 2 or hd[0] != hd[1] or hd[0] not in TARGETS:
            raise DataError(f"HR images must be square at one of {TARGETS}, got {hd} and {hi}")
        if self.augmentation not in AUGMENTATIONS:
            raise DataError(f"unknown augmentation {self.augmentation!r}")


@lru_cache(maxsize=32)
def area_matrix(in_size: int, out_size: int) -> np.ndarray:
    """``(out_size, in_size)`` matrix of fractional overlaps; rows sum to one."""
    if out_size > in_size:
        raise ShapeError(f"area averaging cannot upsample {in_size} -> {out_size}")
    edges = np.arange(out_size + 1) * (in_size / out_size)
    m = np.zeros((out_size, in_size))
    for o in range(out_size):
        lo, hi = edges[o], edges[o + 1]
        for s in range(int(np.floor(lo)), min(int(np.ceil(hi)), in_size)):
            m[o, s] = min(hi, s + 1) - max(lo, s)
    m /= m.sum(axis=1, keepdims=True)
    m.setflags(write=False)
    return m


def area_downsample(img, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    if h < out_h or w < out_w:
        raise ShapeError(f"image {img.shape} smaller than target {(out_h, out_w)}")
    return area_matrix(h, out_h) @ img @ area_matrix(w, out_w).T


def resample_square(img, target: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape == (target, target):
        return img.copy()
    return bicubic_upsample(img.astype(np.float32), target, target)[0, 0].astype(np.float64)


def dead_zone_passthrough(lr_depth: np.ndarray, lr_intensity: np.ndarray):
    """Hook point for non-illuminated dead-zone compensation; identity here."""
    return lr_depth, lr_intensity


def make_pair(hr_depth, hr_intensity, target: int = 256, nonuniformity=None, scene_id: str = "",
              dead_zone: Callable = dead_zone_passthrough) -> PairSample:
    """Build an LR/HR sample from one HR depth/intensity pair.

    ``nonuniformity`` (a :class:`~litesr.calibration.NonUniformityMap`)
    corrupts the LR frames by dividing by its gains, so the calibration
    correction recovers the clean LR.
    """
    if target not in TARGETS:
        raise DataError(f"target must be one of {TARGETS}")
    hd = np.asarray(hr_depth, dtype=np.float64)
    hi = np.asarray(hr_intensity, dtype=np.float64)
    if hd.shape != hi.shape:
        raise ShapeError(f"HR depth {hd.shape} and intensity {hi.shape} differ")
    if hd.ndim != 2 or hd.shape[0] < LR_SHAPE[0] or hd.shape[1] < LR_SHAPE[1]:
        raise ShapeError(f"HR images must be at least {LR_SHAPE}, got {hd.shape}")
    lr_d = area_downsample(hd, *LR_SHAPE)
    lr_i = area_downsample(hi, *LR_SHAPE)
    lr_d, lr_i = dead_zone(lr_d, lr_i)
    if nonuniformity is not None:
        lr_d = calibration.apply_nonuniformity(lr_d, nonuniformity.depth_gain, "corrupt")
        lr_i = calibration.apply_nonuniformity(lr_i, nonuniformity.intensity_gain, "corrupt")
    return PairSample(lr_d, lr_i, resample_square(hd, target), resample_square(hi, target), scene_id)


def normalize(sample: PairSample, stats: DatasetStats) -> PairSample:
    return replace(
        sample,
        lr_depth=(sample.lr_depth - stats.mean_depth) / stats.std_depth,
        hr_depth=(sample.hr_depth - stats.mean_depth) / stats.std_depth,
        lr_intensity=(sample.lr_intensity - stats.mean_intensity) / stats.std_intensity,
        hr_intensity=(sample.hr_intensity - stats.mean_intensity) / stats.std_intensity,
    )


def denormalize(sample: PairSample, stats: DatasetStats) -> PairSample:
    return replace(
        sample,
        lr_depth=sample.lr_depth * stats.std_depth + stats.mean_depth,
        hr_depth=sample.hr_depth * stats.std_depth + stats.mean_depth,
        lr_intensity=sample.lr_intensity * stats.std_intensity + stats.mean_intensity,
        hr_intensity=sample.hr_intensity * stats.std_intensity + stats.mean_intensity,
    )


_FLIPS = {"none": (), "hflip": (-1,), "vflip": (-2,), "hvflip": (-2, -1)}
_COMPOSE = {frozenset(): "none", frozenset({-1}): "hflip", frozenset({-2}): "vflip",
            frozenset({-1, -2}): "hvflip"}


def augment(sample: PairSample, mode: str) -> PairSample:
    """Apply the same flip to all four images; tracks the net flip state."""
    if mode not in _FLIPS:
        raise DataError(f"unknown augmentation {mode!r}")
    axes = _FLIPS[mode]
    if not axes:
        return sample
    net = frozenset(_FLIPS[sample.augmentation]) ^ frozenset(axes)
    return replace(
        sample,
        lr_depth=np.flip(sample.lr_depth, axes).copy(),
        lr_intensity=np.flip(sample.lr_intensity, axes).copy(),
        hr_depth=np.flip(sample.hr_depth, axes).copy(),
        hr_intensity=np.flip(sample.hr_intensity, axes).copy(),
        augmentation=_COMPOSE[net],
    )


def split(samples: Sequence, ratio: float = 0.8, seed: int = 0):
    """Seeded shuffle, then ``floor(ratio * N)`` train / remainder validation."""
    if not len(samples):
        raise DataError("cannot split an empty sample list")
    if not 0.0 <= ratio <= 1.0:
        raise DataError("ratio must lie in [0, 1]")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(np.floor(ratio * len(samples)))
    return [samples[k] for k in order[:n_train]], [samples[k] for k in order[n_train:]]


def synthetic_scene(rng: np.random.Generator, shape=(256, 384), n_boxes: int = 6):
    """Piecewise-planar indoor-like scene: depth in metres, intensity in counts.

    Depth stays inside the sensor's 1.4 m range; intensity follows an
    albedo / distance^2 falloff scaled to a few hundred counts.
    """
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    depth = 1.2 - 0.3 * yy + 0.1 * rng.uniform(-1, 1) * xx
    albedo = np.full(shape, 0.6)
    for _ in range(n_boxes):
        y0, x0 = rng.uniform(0, 0.8, 2)
        y1, x1 = y0 + rng.uniform(0.1, 0.4), x0 + rng.uniform(0.1, 0.4)
        inside = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        tilt = rng.uniform(-0.1, 0.1)
        depth = np.where(inside, rng.uniform(0.3, 0.9) + tilt * (xx - x0), depth)
        albedo = np.where(inside, rng.uniform(0.2, 1.0), albedo)
    depth = np.clip(depth, 0.15, 1.4)
    texture = 1.0 + 0.1 * np.sin(2 * np.pi * (xx * rng.integers(3, 12) + yy * rng.integers(3, 12)))
    intensity = np.clip(80.0 * albedo * texture / depth**2, 0, 4000)
    return depth, intensity


def find_hr_pairs(hr_dir) -> list[tuple[str, Path, Path]]:
    """``<scene>_depth.pgm`` / ``<scene>_intensity.pgm`` pairs, sorted by scene."""
    hr_dir = Path(hr_dir)
    pairs = []
    for dpath in sorted(hr_dir.glob("*_depth.pgm")):
        scene = dpath.name[: -len("_depth.pgm")]
        ipath = hr_dir / f"{scene}_intensity.pgm"
        if ipath.exists():
            pairs.append((scene, dpath, ipath))
        else:
            log.warning("no intensity image for scene %s", scene)
    return pairs


def load_hr_pair(depth_path, intensity_path):
    """Depth PGM in millimetres -> metres; intensity PGM as counts."""
    return read_pgm(depth_path).astype(np.float64) / 1000.0, read_pgm(intensity_path).astype(np.float64)


def write_sample(sample: PairSample, out_dir) -> Path:
    """Write one sample directory (depth as 16-bit mm, intensity as 16-bit counts)."""
    d = Path(out_dir) / sample.scene_id
    d.mkdir(parents=True, exist_ok=True)
    for name in ("lr_depth", "hr_depth"):
        write_pgm(d / f"{name}.pgm", np.clip(getattr(sample, name) * 1000.0, 0, 65535))
    for name in ("lr_intensity", "hr_intensity"):
        write_pgm(d / f"{name}.pgm", np.clip(getattr(sample, name), 0, 65535))
    return d


def read_sample(sample_dir) -> PairSample:
    d = Path(sample_dir)
    return PairSample(
        read_pgm(d / "lr_depth.pgm") / 1000.0,
        read_pgm(d / "lr_intensity.pgm").astype(np.float64),
        read_pgm(d / "hr_depth.pgm") / 1000.0,
        read_pgm(d / "hr_intensity.pgm").astype(np.float64),
        scene_id=d.name,
    )


def generate_dataset(hr_dir, out_dir, target: int = 256, seed: int = 0, ratio: float = 0.8,
                     nonuniformity=None) -> dict:
    """Turn a directory of HR pairs into sample directories plus ``manifest.json``."""
    out_dir = Path(out_dir)
    pairs = find_hr_pairs(hr_dir)
    if not pairs:
        raise DataError(f"no <scene>_depth.pgm / <scene>_intensity.pgm pairs in {hr_dir}")
    samples = []
    for scene, dpath, ipath in pairs:
        hd, hi = load_hr_pair(dpath, ipath)
        samples.append(make_pair(hd, hi, target, nonuniformity, scene_id=scene))
    for s in samples:
        write_sample(s, out_dir)
    try:
        stats = DatasetStats.compute(samples).to_dict()
    except DataError:
        log.warning("dataset has zero variance; no normalization statistics recorded")
        stats = None
    train, val = split(samples, ratio, seed)
    manifest = {
        "target": target,
        "seed": seed,
        "ratio": ratio,
        "lr_shape": list(LR_SHAPE),
        "nonuniformity": nonuniformity is not None,
        "stats": stats,
        "train": [s.scene_id for s in train],
        "val": [s.scene_id for s in val],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
