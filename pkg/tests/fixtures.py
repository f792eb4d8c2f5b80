"""Shared deterministic fixtures for model-level tests."""

import numpy as np
from scipy.signal import correlate2d

from litesr.model import SMALLEST, build_model, init_weights

GOLDEN_SEED = 7


def lr_pair(seed, n=1):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0.2, 1.4, (n, 1, 32, 48)).astype(np.float32)
    inten = rng.uniform(0.0, 1.0, (n, 1, 32, 48)).astype(np.float32)
    return depth, inten


def golden_model():
    return build_model(SMALLEST, init_weights(SMALLEST, GOLDEN_SEED))


def scipy_conv(weights, specs):
    """Convolution callback for ``run_graph`` built on scipy's 2-D correlation."""

    def conv(name, x):
        s = specs[name]
        w = np.asarray(weights[f"{name}.weight"], np.float64)
        b = np.asarray(weights[f"{name}.bias"], np.float64)
        oc, ic, kh, kw = w.shape
        d = s.dilation
        dil = np.zeros((oc, ic, d * (kh - 1) + 1, d * (kw - 1) + 1))
        dil[:, :, ::d, ::d] = w
        xp = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (s.padding,) * 2, (s.padding,) * 2))
        out = []
        for n in range(x.shape[0]):
            planes = []
            for o in range(oc):
                acc = sum(correlate2d(xp[n, c], dil[o, c], mode="valid") for c in range(ic))
                planes.append(acc + b[o])
            out.append(planes)
        return np.asarray(out, np.float32)

    return conv


def fixture_suite(n=8, seed=0, target=256):
    """Normalized synthetic LR/HR samples plus the stats used to normalize them."""
    from litesr.datagen import DatasetStats, make_pair, normalize, synthetic_scene

    rng = np.random.default_rng(seed)
    samples = [make_pair(*synthetic_scene(rng), target=target, scene_id=f"s{k}") for k in range(n)]
    stats = DatasetStats.compute(samples)
    return [normalize(s, stats) for s in samples], stats


def as_frames(samples):
    return [(s.lr_depth.astype(np.float32)[None, None], s.lr_intensity.astype(np.float32)[None, None])
            for s in samples]
