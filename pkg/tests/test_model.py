from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from litesr.model import (
    GATE_KEYS,
    LARGE_8X,
    SMALLEST,
    ModelConfig,
    ModelWeights,
    WeightValidationError,
    build_model,
    count_params,
    earb_block,
    earb_specs,
    expected_shapes,
    guidance_mask,
    init_weights,
    layer_specs,
    rlfb_block,
    rlfb_specs,
    run_graph,
    zero_residual_weights,
)
from litesr.tensor import ShapeError, bicubic_upsample

from fixtures import GOLDEN_SEED, golden_model, lr_pair, scipy_conv

GOLDEN = Path(__file__).parent / "data" / "golden_forward.npz"


@pytest.fixture(scope="module")
def model():
    return golden_model()


def test_smallest_config_output_shape(model):
    res = model.forward(*lr_pair(0))
    assert res.depth_hr.shape == (1, 1, 256, 256)
    assert res.intensity_hr.shape == (1, 1, 256, 256)
    assert res.depth_hr.dtype == np.float32


def test_batched_forward_matches_single(model):
    d, i = lr_pair(1, n=3)
    batch = model.forward(d, i)
    one = model.forward(d[1:2], i[1:2])
    np.testing.assert_allclose(batch.depth_hr[1:2], one.depth_hr, atol=1e-6)


def test_gated_residual_identity(model):
    res = model.forward(*lr_pair(2))
    gd = 1 / (1 + np.exp(-model.weights.gate_logit_depth))
    gi = 1 / (1 + np.exp(-model.weights.gate_logit_intensity))
    np.testing.assert_allclose(res.depth_hr, res.base_depth + gd * res.residual_depth, atol=1e-5)
    np.testing.assert_allclose(res.intensity_hr, res.base_intensity + gi * res.residual_intensity, atol=1e-5)


def test_zero_residual_equals_bicubic_exactly():
    m = build_model(SMALLEST, zero_residual_weights(init_weights(SMALLEST, 3)))
    d, i = lr_pair(3)
    res = m.forward(d, i)
    np.testing.assert_array_equal(res.depth_hr, bicubic_upsample(d, 256, 256))
    np.testing.assert_array_equal(res.intensity_hr, bicubic_upsample(i, 256, 256))


def test_closed_gate_equals_bicubic():
    w = init_weights(SMALLEST, 4).replace({k: np.float32(-40.0) for k in GATE_KEYS})
    m = build_model(SMALLEST, w)
    d, i = lr_pair(4)
    res = m.forward(d, i)
    np.testing.assert_allclose(res.depth_hr, res.base_depth, atol=1e-6)
    np.testing.assert_allclose(res.intensity_hr, res.base_intensity, atol=1e-6)


def test_gate_monotonicity():
    d, i = lr_pair(5)
    prev = None
    base = init_weights(SMALLEST, 5)
    for g in (-3.0, -1.0, 0.0, 1.0, 3.0):
        res = build_model(SMALLEST, base.replace({"gate.depth": np.float32(g)})).forward(d, i)
        step = (res.depth_hr - res.base_depth).astype(np.float64)
        if prev is not None:
            r = res.residual_depth.astype(np.float64)
            moved = (step - prev) * np.sign(r)
            assert np.all(moved[np.abs(r) > 1e-4] > 0)
        prev = step


def test_forward_is_bit_stable(model):
    d, i = lr_pair(6)
    a = model.forward(d, i)
    b = model.forward(d.copy(), i.copy())
    np.testing.assert_array_equal(a.depth_hr, b.depth_hr)
    np.testing.assert_array_equal(a.intensity_hr, b.intensity_hr)


def test_golden_output(model):
    ref = np.load(GOLDEN)
    res = model.forward(*lr_pair(GOLDEN_SEED))
    np.testing.assert_allclose(res.depth_hr, ref["depth_hr"], atol=1e-5)
    np.testing.assert_allclose(res.intensity_hr, ref["intensity_hr"], atol=1e-5)


def test_golden_cross_checked_with_independent_conv(model):
    d, i = lr_pair(GOLDEN_SEED)
    w = model.weights
    res = run_graph(SMALLEST, scipy_conv(w.entries, model.specs), (w.gate_logit_depth, w.gate_logit_intensity), d, i)
    ref = np.load(GOLDEN)
    np.testing.assert_allclose(res.depth_hr, ref["depth_hr"], atol=1e-5)
    np.testing.assert_allclose(res.intensity_hr, ref["intensity_hr"], atol=1e-5)


def test_depth_weights_do_not_touch_intensity_output(model):
    d, i = lr_pair(8)
    zeroed = model.weights.replace({k: np.zeros_like(v) for k, v in model.weights.entries.items()
                                    if k.startswith("depth.")})
    a = model.forward(d, i)
    b = build_model(SMALLEST, zeroed).forward(d, i)
    np.testing.assert_array_equal(a.intensity_hr, b.intensity_hr)


def test_guidance_is_one_way(model):
    d, i = lr_pair(9)
    ref = model.forward(d, i)
    no_depth = model.forward(np.zeros_like(d), i)
    np.testing.assert_array_equal(ref.intensity_hr, no_depth.intensity_hr)
    no_int = model.forward(d, np.zeros_like(i))
    assert not np.allclose(ref.depth_hr, no_int.depth_hr)


def test_guidance_mask_range():
    _, i = lr_pair(10)
    m = guidance_mask(i)
    assert m.shape == i.shape
    assert m.min() == 0.0 and m.max() == pytest.approx(1.0)
    assert np.all(guidance_mask(np.zeros_like(i)) == 0)


def test_rejects_wrong_input_shape(model):
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 1, 32, 32), np.float32), np.zeros((1, 1, 32, 32), np.float32))


def test_missing_gate_rejected():
    w = init_weights(SMALLEST, 0)
    entries = dict(w.entries)
    del entries["gate.depth"]
    with pytest.raises(WeightValidationError, match="gate.depth"):
        build_model(SMALLEST, ModelWeights(entries))


def test_wrong_shape_and_extra_key_rejected():
    w = init_weights(SMALLEST, 0)
    with pytest.raises(WeightValidationError, match="depth.stem.weight"):
        build_model(SMALLEST, w.replace({"depth.stem.weight": np.zeros((10, 1, 5, 5), np.float32)}))
    with pytest.raises(WeightValidationError, match="bogus"):
        build_model(SMALLEST, w.replace({"bogus": np.zeros(1, np.float32)}))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, 5, 6, 4, upscale=2)
    with pytest.raises(ValueError):
        ModelConfig(0, 5, 6, 4)


def _block_weights(specs, rng, lo=0.05, hi=0.15):
    w = {}
    for name, s in specs.items():
        w[f"{name}.weight"] = rng.uniform(lo, hi, s.weight_shape).astype(np.float32)
        w[f"{name}.bias"] = np.zeros(s.out_channels, np.float32)
    return w


def _support(block, size=41):
    """Side length of the output region that reacts to a single-pixel input change."""
    ch = 3
    x = np.ones((1, ch, size, size), np.float32)
    probe = x.copy()
    probe[0, 0, size // 2, size // 2] += 1.0
    diff = np.abs(block(probe) - block(x)).sum(axis=(0, 1))
    rows = np.nonzero(diff.any(axis=1))[0]
    cols = np.nonzero(diff.any(axis=0))[0]
    assert rows.size and rows[-1] - rows[0] == cols[-1] - cols[0]
    return int(rows[-1] - rows[0] + 1)


def test_earb_receptive_field_dilation_2():
    w = _block_weights(earb_specs(3, 2), np.random.default_rng(0))
    assert _support(lambda x: earb_block(x, w, dilation=2)) == 9


def test_earb_stack_support_grows():
    rng = np.random.default_rng(1)
    sizes = []
    schedule = (1, 2, 4, 2)
    ws = [_block_weights(earb_specs(3, d), rng) for d in schedule]
    for n in range(1, len(schedule) + 1):
        def stack(x, n=n):
            for w, d in zip(ws[:n], schedule[:n]):
                x = earb_block(x, w, dilation=d)
            return x
        sizes.append(_support(stack, size=81))
    assert sizes == sorted(sizes) and len(set(sizes)) == len(sizes)
    assert sizes == [5, 13, 29, 37]


def test_rlfb_receptive_field():
    w = _block_weights(rlfb_specs(3), np.random.default_rng(2))
    assert _support(lambda x: rlfb_block(x, w)) == 7


def test_blocks_with_zero_weights_are_identity():
    x = np.random.default_rng(3).standard_normal((1, 3, 8, 8)).astype(np.float32)
    ew = {k: np.zeros_like(v) for k, v in _block_weights(earb_specs(3, 2), np.random.default_rng(0)).items()}
    rw = {k: np.zeros_like(v) for k, v in _block_weights(rlfb_specs(3), np.random.default_rng(0)).items()}
    np.testing.assert_array_equal(earb_block(x, ew, dilation=2), x)
    np.testing.assert_array_equal(rlfb_block(x, rw), x)


def test_rlfb_differs_from_plain_variant():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 10, 10)).astype(np.float32)
    full = rlfb_block(x, _block_weights(rlfb_specs(3), rng, -0.3, 0.3))
    plain = rlfb_block(x, _block_weights(rlfb_specs(3, plain=True), rng, -0.3, 0.3), plain=True)
    assert full.shape == plain.shape
    assert not np.allclose(full, plain)


def test_ablation_keeps_layer_count_and_shapes():
    full = layer_specs(SMALLEST)
    for flag in ("ablate_earb", "ablate_rlfb"):
        cfg = ModelConfig(10, 5, 6, 4, **{flag: True})
        assert len(layer_specs(cfg)) == len(full)
        m = build_model(cfg, init_weights(cfg, 0))
        assert m.forward(*lr_pair(0)).depth_hr.shape == (1, 1, 256, 256)


def test_count_params_single_conv():
    fake = SimpleNamespace(config=SMALLEST, weights=ModelWeights({
        "c.weight": np.zeros((1, 1, 3, 3), np.float32), "c.bias": np.zeros(1, np.float32)}))
    assert count_params(fake)["params"] == 10
    assert count_params(fake)["bytes"] == 40


def test_count_params_matches_expected_shapes():
    m = build_model(SMALLEST, init_weights(SMALLEST, 0))
    total = sum(int(np.prod(s)) for s in expected_shapes(SMALLEST).values())
    info = count_params(m)
    assert info["params"] == total
    assert info["bytes"] == 4 * total


def test_8x_has_more_macs_than_4x():
    four = ModelConfig(32, 16, 10, 8, upscale=4)
    m4 = build_model(four, init_weights(four, 0))
    m8 = build_model(LARGE_8X, init_weights(LARGE_8X, 0))
    assert count_params(m8)["macs"] > count_params(m4)["macs"]
    assert count_params(m8)["params"] > count_params(m4)["params"]


def test_weights_are_frozen(model):
    with pytest.raises(ValueError):
        model.weights.entries["depth.stem.weight"][0, 0, 0, 0] = 1.0
