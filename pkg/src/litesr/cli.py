"""``litesr`` command line for inference, evaluation, quantization, calibration,
data generation and stream simulation.

Exit codes: 0 ok, 2 validation / usage error, 3 I/O error. Every command
writes one JSON manifest next to its outputs: ``<out>/manifest.json`` for
directory outputs, ``<file>.manifest.json`` for single-file outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    CalibrationBundle,
    NonUniformityMap,
    compensate_hot_pixels,
    detect_hot_pixels,
    estimate_nonuniformity,
)
from .datagen import DatasetStats, generate_dataset, read_sample, synthetic_scene
from .metrics import MetricReport, evaluate
from .model import ModelConfig, build_model, init_weights, zero_residual_weights
from .pgm import read_pgm, write_pgm
from .protocol import StreamConfig, default_preprocess, frames_from_samples, simulate_stream, synthetic_frames
from .quantizer import QuantizedModel, quantize_model
from .tensor import bicubic_upsample
from .weightfile import load_model, save_model

log = logging.getLogger("litesr")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3


class UsageError(ValueError):
    pass


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("LITESR_SEED", "0"))


def write_manifest(path: Path, command: str, args, inputs: dict, outputs: list, seed, t0: float,
                   extra: dict | None = None) -> Path:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "seed": seed,
        "versions": {"litesr": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": round(time.perf_counter() - t0, 6),
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def _load_stats(path) -> DatasetStats | None:
    if path is None:
        return None
    doc = json.loads(Path(path).read_text())
    stats = doc.get("stats", doc)
    return None if stats is None else DatasetStats(**stats)


def _read_lr(depth_path, intensity_path):
    depth = read_pgm(depth_path).astype(np.float64) / 1000.0
    inten = read_pgm(intensity_path).astype(np.float64)
    if depth.shape != (32, 48) or inten.shape != (32, 48):
        raise UsageError(f"LR inputs must be 32x48, got {depth.shape} and {inten.shape}")
    return depth, inten


def _write_hr(out_dir: Path, depth_m: np.ndarray, counts: np.ndarray) -> list[Path]:
    paths = [out_dir / "depth_hr.pgm", out_dir / "intensity_hr.pgm"]
    write_pgm(paths[0], np.clip(depth_m * 1000.0, 0, 65535))
    write_pgm(paths[1], np.clip(counts, 0, 65535))
    return paths


def _comparison_png(path: Path, rows) -> None:
    """Side-by-side panels, one row per modality, shared gray scale per row."""
    from PIL import Image

    tiles = []
    for row in rows:
        lo = min(float(p.min()) for p in row)
        hi = max(float(p.max()) for p in row)
        span = hi - lo if hi > lo else 1.0
        tiles.append(np.concatenate([np.uint8(np.clip((p - lo) / span, 0, 1) * 255) for p in row], axis=1))
    Image.fromarray(np.concatenate(tiles, axis=0)).save(path)


def cmd_baseline(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    depth, inten = _read_lr(args.depth, args.intensity)
    bd = bicubic_upsample(depth.astype(np.float32), args.target, args.target)[0, 0]
    bi = bicubic_upsample(inten.astype(np.float32), args.target, args.target)[0, 0]
    outputs = _write_hr(out, bd.astype(np.float64), bi.astype(np.float64))
    write_manifest(out / "manifest.json", "baseline", args, {"depth": args.depth, "intensity": args.intensity}, outputs, None, t0)
    return EXIT_OK


def cmd_infer(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    model = load_model(args.weights)
    if args.precision == "int8" and not isinstance(model, QuantizedModel):
        raise UsageError("--precision int8 needs a calibrated INT8 container (run `litesr quantize` with --calib-dir)")
    if args.precision == "fp32" and isinstance(model, QuantizedModel):
        raise UsageError("container is INT8; pass --precision int8")
    if isinstance(model, QuantizedModel) and not model.is_calibrated:
        raise UsageError("INT8 container has no activation calibration; re-run `litesr quantize` with --calib-dir")
    depth, inten = _read_lr(args.depth, args.intensity)
    if args.calibration:
        bundle = CalibrationBundle.load(args.calibration)
        inten = compensate_hot_pixels(inten, bundle.hot_pixels)
    stats = _load_stats(args.stats)
    d_in, i_in = depth, inten
    if stats is not None:
        d_in = (depth - stats.mean_depth) / stats.std_depth
        i_in = (inten - stats.mean_intensity) / stats.std_intensity
    res = model.forward(d_in.astype(np.float32)[None, None], i_in.astype(np.float32)[None, None])
    d_hr = res.depth_hr[0, 0].astype(np.float64)
    i_hr = res.intensity_hr[0, 0].astype(np.float64)
    b_d = res.base_depth[0, 0].astype(np.float64)
    b_i = res.base_intensity[0, 0].astype(np.float64)
    if stats is not None:
        d_hr, b_d = (x * stats.std_depth + stats.mean_depth for x in (d_hr, b_d))
        i_hr, b_i = (x * stats.std_intensity + stats.mean_intensity for x in (i_hr, b_i))
    out.mkdir(parents=True, exist_ok=True)
    outputs = _write_hr(out, d_hr, i_hr)
    png = out / "comparison.png"
    _comparison_png(png, [(b_d, d_hr), (b_i, i_hr)])
    outputs.append(png)
    write_manifest(out / "manifest.json", "infer", args, {"weights": args.weights, "depth": args.depth,
                                        "intensity": args.intensity}, outputs, None, t0)
    return EXIT_OK


METRIC_COLUMNS = {
    "depth": [("ssim", "SSIM ↑"), ("psnr_db", "PSNR (dB) ↑"), ("rmse", "RMSE ↓"), ("delta_125", "δ < 1.25 ↑")],
    "intensity": [("ms_ssim", "MS-SSIM ↑"), ("psnr_db", "PSNR (dB) ↑"), ("gmsd", "GMSD ↓"),
                  ("ngmsd", "nGMSD ↓")],
}


def _fmt(v) -> str:
    if v is None:
        return "-"
    if math.isinf(v):
        return "inf"
    return f"{v:.4f}"


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    preds = {p.name: p for p in sorted(pred_dir.glob("*.pgm"))}
    gts = {p.name: p for p in sorted(gt_dir.glob("*.pgm"))}
    if not preds and not gts:
        raise UsageError("no .pgm files in either directory")
    names = sorted(set(preds) & set(gts))
    unpaired = sorted(set(preds) ^ set(gts))
    for name in unpaired:
        log.warning("unpaired file skipped: %s", name)
    if not names:
        raise UsageError("no paired files")

    def one(name):
        pred = read_pgm(preds[name]).astype(np.float64)
        gt = read_pgm(gts[name]).astype(np.float64)
        if args.modality == "depth":
            pred, gt = pred / 1000.0, gt / 1000.0
        rng = args.data_range if args.data_range is not None else float(gt.max())
        if rng <= 0:
            raise UsageError(f"{name}: ground truth is all zero; pass --data-range")
        return name, evaluate(pred, gt, args.modality, data_range=rng)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        reports = dict(pool.map(one, names))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = METRIC_COLUMNS[args.modality]
    per_scene = {name: json.loads(rep.to_json()) for name, rep in reports.items()}
    (out / "metrics.json").write_text(json.dumps(per_scene, indent=2))

    rows = []
    for name, rep in reports.items():
        rows.append([Path(name).stem] + [getattr(rep, key) for key, _ in cols])
    means = []
    for j in range(len(cols)):
        vals = [r[j + 1] for r in rows if r[j + 1] is not None]
        means.append(float(np.mean(vals)) if vals else None)
    rows.append(["mean"] + means)

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["scene"] + [key for key, _ in cols])
    for r in rows:
        writer.writerow([r[0]] + ["inf" if (v is not None and math.isinf(v)) else v for v in r[1:]])
    (out / "table.csv").write_text(buf.getvalue())

    header = ["Scene"] + [label for _, label in cols]
    lines = [header] + [[r[0]] + [_fmt(v) for v in r[1:]] for r in rows]
    widths = [max(len(line[k]) for line in lines) for k in range(len(header))]
    text = "\n".join(" | ".join(c.ljust(w) for c, w in zip(line, widths)) for line in lines)
    (out / "table.txt").write_text(text + "\n")
    print(text)

    write_manifest(out / "manifest.json", "eval", args, {"pred_dir": pred_dir, "gt_dir": gt_dir},
                   [out / "metrics.json", out / "table.csv", out / "table.txt"], None, t0,
                   {"unpaired": unpaired})
    if unpaired and args.strict:
        return EXIT_VALIDATION
    return EXIT_OK


def _calibration_frames(calib_dir: Path, stats: DatasetStats | None):
    sample_dirs = sorted(p for p in calib_dir.iterdir() if (p / "lr_depth.pgm").exists())
    frames = []
    for d in sample_dirs:
        s = read_sample(d)
        depth, inten = s.lr_depth, s.lr_intensity
        if stats is not None:
            depth = (depth - stats.mean_depth) / stats.std_depth
            inten = (inten - stats.mean_intensity) / stats.std_intensity
        frames.append((depth.astype(np.float32)[None, None], inten.astype(np.float32)[None, None]))
    return frames


def cmd_quantize(args) -> int:
    t0 = time.perf_counter()
    model = load_model(args.weights_in)
    if isinstance(model, QuantizedModel):
        raise UsageError("input container is already INT8")
    calib_dir = Path(args.calib_dir)
    stats = _load_stats(args.stats) if args.stats else _load_stats(calib_dir / "manifest.json") \
        if (calib_dir / "manifest.json").exists() else None
    frames = _calibration_frames(calib_dir, stats)
    qmodel = quantize_model(model, frames)
    out = Path(args.weights_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_out = save_model(out, qmodel)
    n_in = Path(args.weights_in).stat().st_size
    print(f"INT8 container {n_out} bytes ({100.0 * n_out / n_in:.1f}% of FP32 {n_in} bytes)")
    write_manifest(_sidecar(out), "quantize", args, {"weights_in": args.weights_in, "calib_dir": calib_dir},
                   [out], None, t0, {"calibration_frames": len(frames), "bytes_fp32": n_in, "bytes_int8": n_out})
    return EXIT_OK


def _pgm_frames(directory) -> list[np.ndarray]:
    return [read_pgm(p).astype(np.float64) for p in sorted(Path(directory).glob("*.pgm"))]


def cmd_calibrate(args) -> int:
    t0 = time.perf_counter()
    frames = _pgm_frames(args.flat_dir)
    if not frames:
        raise UsageError(f"no .pgm flat-field frames in {args.flat_dir}")
    hot = detect_hot_pixels(frames, args.threshold)
    nu = None
    if args.flat_depth_dir:
        depth_frames = [f / 1000.0 for f in _pgm_frames(args.flat_depth_dir)]
        nu = estimate_nonuniformity(depth_frames, frames, hot)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    CalibrationBundle(hot, nu).save(out)
    print(f"{hot.count} hot pixels at threshold {args.threshold:g} counts")
    write_manifest(_sidecar(out), "calibrate", args, {"flat_dir": args.flat_dir}, [out], None, t0,
                   {"hot_pixels": hot.count})
    return EXIT_OK


def _write_synthetic_hr(hr_dir: Path, n: int, seed: int) -> None:
    hr_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for k in range(n):
        depth, inten = synthetic_scene(rng)
        write_pgm(hr_dir / f"scene{k:04d}_depth.pgm", depth * 1000.0)
        write_pgm(hr_dir / f"scene{k:04d}_intensity.pgm", inten)


def cmd_datagen(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hr_dir = Path(args.hr_dir) if args.hr_dir else out / "hr"
    if args.synthetic:
        _write_synthetic_hr(hr_dir, args.synthetic, seed)
    if not hr_dir.is_dir():
        raise UsageError(f"HR directory {hr_dir} does not exist")
    nu = None
    if args.nonuniformity:
        nu = CalibrationBundle.load(args.nonuniformity).nonuniformity
        if nu is None:
            raise UsageError(f"{args.nonuniformity} carries no non-uniformity maps")
    elif args.random_nonuniformity:
        nu = NonUniformityMap.random(np.random.default_rng(seed), spread=args.random_nonuniformity)
    manifest = generate_dataset(hr_dir, out, target=args.target, seed=seed, ratio=args.ratio, nonuniformity=nu)
    scenes = manifest["train"] + manifest["val"]
    # The dataset manifest and the run manifest share one file.
    write_manifest(out / "manifest.json", "datagen", args, {"hr_dir": hr_dir},
                   [out / s for s in sorted(scenes)], seed, t0, manifest)
    print(f"{len(scenes)} samples at {args.target}x{args.target}: "
          f"{len(manifest['train'])} train / {len(manifest['val'])} val")
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    model = load_model(args.weights) if args.weights else None
    stats = _load_stats(args.norm_stats) if args.norm_stats else None
    if args.source.startswith("synthetic"):
        _, _, count = args.source.partition(":")
        source = synthetic_frames(int(count) if count else args.frames, seed)
    else:
        root = Path(args.source)
        dirs = sorted(p for p in root.iterdir() if (p / "lr_depth.pgm").exists())
        if not dirs:
            raise UsageError(f"no sample directories under {root}")
        source = frames_from_samples(dirs)
    config = StreamConfig(iterations=args.frames, period_ms=args.period_ms)
    sr = simulate_stream(config, source, model=model, consumer_delay_ms=args.consumer_delay_ms,
                         clock=args.clock, preprocess=lambda p: default_preprocess(p, stats))
    out = Path(args.stats_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(sr.to_json())
    print(f"produced {sr.produced}, consumed {sr.consumed}, dropped {sr.drops}, "
          f"{sr.effective_fps:.2f} fps (nominal {sr.nominal_fps:.1f})")
    write_manifest(_sidecar(out), "simulate", args, {"source": args.source}, [out], seed, t0)
    return EXIT_VALIDATION if sr.error else EXIT_OK


def cmd_init_weights(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    ch = [int(v) for v in args.channels.split(",")]
    if len(ch) != 4:
        raise UsageError("--channels takes CH_E,CH_R,CH_DH,CH_IH")
    config = ModelConfig(*ch, n_earb=args.n_earb, n_rlfb=args.n_rlfb, upscale=args.upscale,
                         ablate_earb=args.ablate_earb, ablate_rlfb=args.ablate_rlfb)
    weights = init_weights(config, seed)
    if args.zero_residual:
        weights = zero_residual_weights(weights)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = save_model(out, build_model(config, weights))
    print(f"wrote {out} ({n} bytes)")
    write_manifest(_sidecar(out), "init-weights", args, {}, [out], seed, t0)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="litesr", description="LiteSR depth/intensity super-resolution toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"litesr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("infer", help="super-resolve one LR depth/intensity pair")
    s.add_argument("--weights", required=True)
    s.add_argument("--depth", required=True, help="32x48 depth PGM in millimetres")
    s.add_argument("--intensity", required=True, help="32x48 intensity PGM in counts")
    s.add_argument("--out", required=True)
    s.add_argument("--precision", choices=("fp32", "int8"), default="fp32")
    s.add_argument("--stats", help="datagen manifest.json with normalization statistics")
    s.add_argument("--calibration", help="calibration bundle; hot pixels are patched in the intensity input")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("baseline", help="bicubic upsampling of one LR pair")
    s.add_argument("--depth", required=True)
    s.add_argument("--intensity", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target", type=int, choices=(256, 512), default=256)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("eval", help="metric tables for prediction vs ground-truth PGMs")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--modality", choices=("depth", "intensity"), required=True)
    s.add_argument("--out", default="eval_out")
    s.add_argument("--data-range", type=float, default=None,
                   help="peak value in physical units (metres / counts); default: per-scene GT maximum")
    s.add_argument("--strict", action="store_true", help="exit 2 if any file is unpaired")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("quantize", help="INT8 post-training quantization")
    s.add_argument("--weights-in", required=True)
    s.add_argument("--calib-dir", required=True, help="datagen output directory (>= 8 samples)")
    s.add_argument("--weights-out", required=True)
    s.add_argument("--stats", help="normalization statistics (default: calib-dir/manifest.json)")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("calibrate", help="hot-pixel mask (and optional gain maps) from flat-field frames")
    s.add_argument("--flat-dir", required=True, help="directory of intensity flat-field PGMs")
    s.add_argument("--flat-depth-dir", help="matching depth flat-field PGMs (mm) for gain maps")
    s.add_argument("--threshold", type=float, default=250.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("datagen", help="LR/HR training pairs from HR images")
    s.add_argument("--hr-dir", help="directory of <scene>_depth.pgm / <scene>_intensity.pgm")
    s.add_argument("--synthetic", type=int, default=0, help="first write N synthetic HR scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--target", type=int, choices=(256, 512), default=256)
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--seed", type=int)
    s.add_argument("--nonuniformity", help="calibration bundle whose gain maps corrupt the LR frames")
    s.add_argument("--random-nonuniformity", type=float, default=0.0, metavar="SPREAD")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("simulate", help="simulate the framed sensor stream")
    s.add_argument("--source", default="synthetic", help="'synthetic[:N]' or a datagen output directory")
    s.add_argument("--period-ms", type=int, default=100)
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--weights")
    s.add_argument("--norm-stats", help="normalization statistics for model inputs")
    s.add_argument("--consumer-delay-ms", type=float, default=0.0)
    s.add_argument("--clock", choices=("virtual", "wall"), default="virtual")
    s.add_argument("--stats-out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("init-weights", help="write a seeded random weight container (fixtures)")
    s.add_argument("--channels", default="10,5,6,4", help="CH_E,CH_R,CH_DH,CH_IH")
    s.add_argument("--upscale", type=int, choices=(4, 8), default=4)
    s.add_argument("--n-earb", type=int, default=4)
    s.add_argument("--n-rlfb", type=int, default=4)
    s.add_argument("--ablate-earb", action="store_true")
    s.add_argument("--ablate-rlfb", action="store_true")
    s.add_argument("--zero-residual", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"litesr {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError, TypeError) as exc:
        print(f"litesr {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
