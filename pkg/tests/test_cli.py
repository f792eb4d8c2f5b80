import json
import os
import subprocess
import sys

import numpy as np
import pytest

from litesr.calibration import CalibrationBundle
from litesr.cli import main
from litesr.datagen import area_downsample, synthetic_scene
from litesr.pgm import read_pgm, write_pgm

from oracles import naive_delta, naive_psnr, naive_ssim


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def lr(tmp_path_factory):
    root = tmp_path_factory.mktemp("lr")
    depth, inten = synthetic_scene(np.random.default_rng(0), (64, 96))
    write_pgm(root / "depth.pgm", area_downsample(depth, 32, 48) * 1000.0)
    write_pgm(root / "intensity.pgm", area_downsample(inten, 32, 48))
    return root / "depth.pgm", root / "intensity.pgm"


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    root = tmp_path_factory.mktemp("weights")
    assert run("init-weights", "--seed", 7, "--out", root / "fp32.npz") == 0
    assert run("init-weights", "--seed", 7, "--zero-residual", "--out", root / "zero.npz") == 0
    return root


def test_zero_residual_infer_matches_baseline(tmp_path, lr, weights):
    d, i = lr
    assert run("baseline", "--depth", d, "--intensity", i, "--out", tmp_path / "base") == 0
    assert run("infer", "--weights", weights / "zero.npz", "--depth", d, "--intensity", i,
               "--out", tmp_path / "sr") == 0
    for name in ("depth_hr.pgm", "intensity_hr.pgm"):
        assert (tmp_path / "sr" / name).read_bytes() == (tmp_path / "base" / name).read_bytes()
    assert (tmp_path / "sr" / "comparison.png").exists()


def test_infer_is_byte_identical_across_runs(tmp_path, lr, weights):
    d, i = lr
    for k in range(2):
        assert run("infer", "--weights", weights / "fp32.npz", "--depth", d, "--intensity", i,
                   "--out", tmp_path / f"run{k}") == 0
    for name in ("depth_hr.pgm", "intensity_hr.pgm"):
        assert (tmp_path / "run0" / name).read_bytes() == (tmp_path / "run1" / name).read_bytes()
    assert read_pgm(tmp_path / "run0" / "depth_hr.pgm").shape == (256, 256)


def test_int8_on_fp32_container_is_rejected(tmp_path, lr, weights, capsys):
    d, i = lr
    code = run("infer", "--weights", weights / "fp32.npz", "--depth", d, "--intensity", i,
               "--out", tmp_path, "--precision", "int8")
    assert code == 2
    assert "calibrat" in capsys.readouterr().err


def test_missing_weights_is_io_error(tmp_path, lr):
    d, i = lr
    assert run("infer", "--weights", tmp_path / "nope.npz", "--depth", d, "--intensity", i,
               "--out", tmp_path / "o") == 3


def test_wrong_lr_size_is_validation_error(tmp_path, weights, capsys):
    write_pgm(tmp_path / "d.pgm", np.zeros((16, 16)))
    assert run("infer", "--weights", weights / "fp32.npz", "--depth", tmp_path / "d.pgm",
               "--intensity", tmp_path / "d.pgm", "--out", tmp_path / "o") == 2
    assert "32x48" in capsys.readouterr().err


def test_datagen_quantize_infer_int8(tmp_path, lr, weights):
    data = tmp_path / "data"
    assert run("datagen", "--synthetic", 8, "--target", 256, "--seed", 1, "--out", data) == 0
    q = tmp_path / "int8.npz"
    assert run("quantize", "--weights-in", weights / "fp32.npz", "--calib-dir", data, "--weights-out", q) == 0
    assert q.stat().st_size < (weights / "fp32.npz").stat().st_size
    d, i = lr
    out = tmp_path / "sr8"
    assert run("infer", "--weights", q, "--precision", "int8", "--stats", data / "manifest.json",
               "--depth", d, "--intensity", i, "--out", out) == 0
    assert run("infer", "--weights", q, "--depth", d, "--intensity", i, "--out", out) == 2
    assert json.loads((tmp_path / "int8.npz.manifest.json").read_text())["command"] == "quantize"


def test_datagen_512(tmp_path):
    out = tmp_path / "d"
    assert run("datagen", "--synthetic", 3, "--target", 512, "--seed", 2, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "datagen" and manifest["seed"] == 2
    for scene in manifest["train"] + manifest["val"]:
        assert read_pgm(out / scene / "hr_depth.pgm").shape == (512, 512)
        assert read_pgm(out / scene / "lr_depth.pgm").shape == (32, 48)


def test_seed_env_fallback_is_deterministic(tmp_path, monkeypatch):
    monkeypatch.setenv("LITESR_SEED", "11")
    assert run("datagen", "--synthetic", 2, "--out", tmp_path / "a") == 0
    assert run("datagen", "--synthetic", 2, "--out", tmp_path / "b") == 0
    assert run("datagen", "--synthetic", 2, "--seed", 12, "--out", tmp_path / "c") == 0
    a = sorted((tmp_path / "a").rglob("*.pgm"))
    b = sorted((tmp_path / "b").rglob("*.pgm"))
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 11
    c = sorted((tmp_path / "c").rglob("*.pgm"))
    assert [p.read_bytes() for p in a] != [p.read_bytes() for p in c]


def test_calibrate_flags_exactly_one(tmp_path, capsys):
    flats = tmp_path / "flats"
    flats.mkdir()
    rng = np.random.default_rng(3)
    for k in range(4):
        f = rng.integers(90, 110, (32, 48)).astype(np.float64)
        f[12, 30] = 300
        write_pgm(flats / f"flat{k}.pgm", f)
    out = tmp_path / "cal.json"
    assert run("calibrate", "--flat-dir", flats, "--threshold", 250, "--out", out) == 0
    assert "1 hot pixels" in capsys.readouterr().out
    mask = CalibrationBundle.load(out).hot_pixels.mask
    assert mask.sum() == 1 and mask[12, 30]
    assert (tmp_path / "cal.json.manifest.json").exists()


def test_calibrate_empty_dir(tmp_path):
    assert run("calibrate", "--flat-dir", tmp_path, "--out", tmp_path / "c.json") == 2


def test_simulate_nominal_rate(tmp_path):
    out = tmp_path / "stats.json"
    assert run("simulate", "--source", "synthetic:20", "--frames", 20, "--period-ms", 100,
               "--stats-out", out) == 0
    stats = json.loads(out.read_text())
    assert abs(stats["effective_fps"] - 10.0) <= 0.5 and stats["drops"] == 0
    assert (tmp_path / "stats.json.manifest.json").exists()


def test_simulate_with_model_and_slow_consumer(tmp_path, weights):
    out = tmp_path / "stats.json"
    assert run("simulate", "--frames", 10, "--consumer-delay-ms", 300, "--weights", weights / "fp32.npz",
               "--stats-out", out) == 0
    stats = json.loads(out.read_text())
    assert stats["consumed_sequences"] == [0, 2, 5, 8, 9]
    assert stats["drops"] == 5
    assert stats["latency_ms"]["inference"]["count"] == 5


def _eval_dirs(tmp_path, pred_imgs, gt_imgs):
    pd, gd = tmp_path / "pred", tmp_path / "gt"
    pd.mkdir()
    gd.mkdir()
    for name, img in pred_imgs.items():
        write_pgm(pd / name, img)
    for name, img in gt_imgs.items():
        write_pgm(gd / name, img)
    return pd, gd


def test_eval_identical_dirs(tmp_path):
    rng = np.random.default_rng(4)
    imgs = {f"s{k}.pgm": rng.integers(300, 3000, (40, 40)).astype(np.float64) for k in range(3)}
    pd, gd = _eval_dirs(tmp_path, imgs, imgs)
    out = tmp_path / "out"
    assert run("eval", "--pred-dir", pd, "--gt-dir", gd, "--modality", "depth", "--out", out, "--jobs", 2) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert list(metrics) == sorted(imgs)
    for m in metrics.values():
        assert m["ssim"] == 1.0 and m["rmse"] == 0.0 and m["delta_125"] == 1.0
        assert m["psnr_db"] == "inf" or m["psnr_db"] == float("inf")
    table = (out / "table.txt").read_text()
    assert "SSIM ↑" in table and "RMSE ↓" in table and "mean" in table
    assert (out / "table.csv").read_text().splitlines()[0] == "scene,ssim,psnr_db,rmse,delta_125"


def test_eval_matches_oracles(tmp_path):
    rng = np.random.default_rng(5)
    gt = rng.integers(500, 2500, (24, 24)).astype(np.float64)
    pred = np.clip(gt + rng.normal(0, 120, gt.shape), 0, None).round()
    pd, gd = _eval_dirs(tmp_path, {"a.pgm": pred}, {"a.pgm": gt})
    assert run("eval", "--pred-dir", pd, "--gt-dir", gd, "--modality", "depth", "--out", tmp_path / "o") == 0
    m = json.loads((tmp_path / "o" / "metrics.json").read_text())["a.pgm"]
    p, g = pred / 1000.0, gt / 1000.0
    rng_m = g.max()
    assert m["psnr_db"] == pytest.approx(naive_psnr(p, g, rng_m), abs=1e-6)
    assert m["ssim"] == pytest.approx(naive_ssim(p, g, rng_m), abs=1e-6)
    assert m["rmse"] == pytest.approx(float(np.sqrt(np.mean((p - g) ** 2))), abs=1e-6)
    assert m["delta_125"] == pytest.approx(naive_delta(p, g), abs=1e-6)


def test_eval_empty_and_unpaired(tmp_path):
    pd, gd = _eval_dirs(tmp_path, {}, {})
    assert run("eval", "--pred-dir", pd, "--gt-dir", gd, "--modality", "intensity", "--out", tmp_path / "o") == 2
    img = np.random.default_rng(6).integers(0, 200, (32, 32)).astype(np.float64)
    write_pgm(pd / "a.pgm", img)
    write_pgm(gd / "a.pgm", img)
    write_pgm(pd / "extra.pgm", img)
    args = ("eval", "--pred-dir", pd, "--gt-dir", gd, "--modality", "intensity", "--out", tmp_path / "o")
    assert run(*args) == 0
    assert run(*args, "--strict") == 2
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["unpaired"] == ["extra.pgm"]


def test_console_script_entry_point(tmp_path):
    env = dict(os.environ)
    proc = subprocess.run([sys.executable, "-m", "litesr.cli", "--version"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and proc.stdout.startswith("litesr ")
    proc = subprocess.run([sys.executable, "-m", "litesr.cli", "eval"], capture_output=True, text=True, env=env)
    assert proc.returncode == 2
