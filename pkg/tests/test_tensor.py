import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from litesr.tensor import (
    ConvSpec,
    DTypeError,
    QTensor,
    ShapeError,
    activation,
    as_tensor,
    bicubic_upsample,
    concat_channels,
    conv2d,
    conv_output_size,
    pixel_shuffle,
    sigmoid,
    sobel_gradients,
    space_to_depth,
)

from oracles import naive_conv2d, naive_pixel_shuffle, naive_sobel, scalar_bicubic


def random_conv_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    oc = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    dil = int(rng.integers(1, 4))
    pad = int(rng.integers(0, 4))
    stride = int(rng.integers(1, 3))
    span = dil * (k - 1) + 1
    h = int(rng.integers(max(1, span - 2 * pad), 9))
    w = int(rng.integers(max(1, span - 2 * pad), 9))
    # Output sizes must come out integral, so round extents up to the stride grid.
    h += (h + 2 * pad - span) % stride
    w += (w + 2 * pad - span) % stride
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((oc, c, k, k)).astype(np.float32)
    b = rng.standard_normal(oc).astype(np.float32)
    spec = ConvSpec(c, oc, (k, k), stride, dil, pad)
    return x, wt, b, spec


def test_conv_sum_of_ones():
    y = conv2d(np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32))
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 7, 5)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d(x, k, spec=ConvSpec(1, 1, padding=1)), x)


def test_conv_dilated_fixed_case():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    y = conv2d(x, w, spec=ConvSpec(3, 4, dilation=2, padding=2))
    np.testing.assert_allclose(y, naive_conv2d(x, w, dilation=2, padding=2), atol=1e-5)


def test_conv_matches_loop_oracle_200_cases():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        x, w, b, spec = random_conv_case(rng)
        got = conv2d(x, w, b, spec)
        want = naive_conv2d(x, w, b, spec.stride, spec.padding, spec.dilation)
        assert got.dtype == np.float32
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)


def test_conv_is_pure():
    rng = np.random.default_rng(3)
    x, w, b, spec = random_conv_case(rng)
    x0 = x.copy()
    assert np.array_equal(conv2d(x, w, b, spec), conv2d(x, w, b, spec))
    np.testing.assert_array_equal(x, x0)


@pytest.mark.parametrize("size,pad,dil,stride,out", [(8, 2, 2, 1, 8), (7, 0, 1, 2, 3), (5, 1, 3, 1, 1)])
def test_conv_output_size(size, pad, dil, stride, out):
    assert conv_output_size(size, 3, stride, dil, pad) == out


def test_conv_output_size_must_be_integral():
    with pytest.raises(ShapeError):
        conv_output_size(8, 1, 2, 1, 1)


def test_conv_rejects_bad_inputs():
    x = np.ones((1, 2, 4, 4), np.float32)
    with pytest.raises(ShapeError):
        conv2d(x, np.ones((1, 3, 3, 3), np.float32))
    with pytest.raises(ShapeError):
        conv2d(x, np.ones((1, 2, 5, 5), np.float32))
    with pytest.raises(DTypeError):
        conv2d(x.astype(np.int32), np.ones((1, 2, 3, 3), np.float32))
    with pytest.raises(DTypeError):
        conv2d(QTensor(np.ones((1, 2, 4, 4), np.int8), 0.1), np.ones((1, 2, 3, 3), np.float32))


def test_qtensor_needs_positive_scale():
    with pytest.raises(ValueError):
        QTensor(np.zeros(3, np.int8), 0.0)


def test_pixel_shuffle_unit_spatial():
    x = np.array([1, 2, 3, 4], np.float32).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(pixel_shuffle(x, 2)[0, 0], [[1, 2], [3, 4]])


def test_pixel_shuffle_r1_identity():
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(pixel_shuffle(x, 1), x)


def test_pixel_shuffle_oracle_and_roundtrip():
    rng = np.random.default_rng(5)
    for _ in range(200):
        r = int(rng.integers(1, 4))
        x = rng.standard_normal((int(rng.integers(1, 3)), r * r * int(rng.integers(1, 3)),
                                 int(rng.integers(1, 5)), int(rng.integers(1, 5)))).astype(np.float32)
        y = pixel_shuffle(x, r)
        np.testing.assert_array_equal(y, naive_pixel_shuffle(x, r))
        np.testing.assert_array_equal(space_to_depth(y, r), x)


def test_pixel_shuffle_bad_channels():
    with pytest.raises(ShapeError):
        pixel_shuffle(np.ones((1, 3, 2, 2), np.float32), 2)


def test_bicubic_constant_and_identity():
    x = np.full((1, 1, 32, 48), 0.37, np.float32)
    np.testing.assert_allclose(bicubic_upsample(x, 256, 256), 0.37, atol=1e-6)
    y = np.random.default_rng(0).random((1, 2, 6, 9)).astype(np.float32)
    np.testing.assert_allclose(bicubic_upsample(y, 6, 9), y, atol=1e-6)


def test_bicubic_ramp_monotone_and_scalar_oracle():
    ramp = np.array([[0.0, 1.0], [1.0, 2.0]])
    up = bicubic_upsample(ramp, 8, 8)[0, 0]
    assert np.all(np.diff(up, axis=0) >= -1e-7)
    assert np.all(np.diff(up, axis=1) >= -1e-7)
    np.testing.assert_allclose(up, scalar_bicubic(ramp, 8, 8), atol=1e-6)


def test_bicubic_matches_scalar_oracle_200_cases():
    rng = np.random.default_rng(11)
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(2, 9, size=2))
        oh, ow = (int(v) for v in rng.integers(1, 20, size=2))
        img = rng.random((h, w))
        got = bicubic_upsample(img.astype(np.float32), oh, ow)[0, 0]
        np.testing.assert_allclose(got, scalar_bicubic(img.astype(np.float32).astype(np.float64), oh, ow),
                                   atol=1e-6)


def test_bicubic_linearity():
    rng = np.random.default_rng(4)
    a = rng.random((1, 1, 32, 48)).astype(np.float32)
    b = rng.random((1, 1, 32, 48)).astype(np.float32)
    alpha, beta = 0.7, -1.3
    lhs = bicubic_upsample(alpha * a + beta * b, 256, 256)
    rhs = alpha * bicubic_upsample(a, 256, 256) + beta * bicubic_upsample(b, 256, 256)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_activations():
    x3 = np.array([-1.0, 0.0, 2.0], np.float32).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(activation(x3, "relu").ravel(), [0, 0, 2])
    assert activation(np.zeros((1, 1, 1, 1), np.float32), "sigmoid").item() == 0.5
    x = (np.random.default_rng(0).standard_normal((1, 2, 20, 25)) * 20).astype(np.float32)
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-6)
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4], np.float32))))
    np.testing.assert_array_equal(activation(x, "identity"), x)
    with pytest.raises(ValueError):
        activation(x, "tanh")


def test_concat_channels():
    rng = np.random.default_rng(0)
    a = rng.random((1, 1, 2, 2)).astype(np.float32)
    b = rng.random((1, 1, 2, 2)).astype(np.float32)
    y = concat_channels(a, b)
    assert y.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(y[:, :1], a)
    np.testing.assert_array_equal(y[:, 1:], b)
    empty = np.zeros((1, 0, 2, 2), np.float32)
    np.testing.assert_array_equal(concat_channels(a, empty), a)
    with pytest.raises(ShapeError):
        concat_channels(a, np.zeros((1, 1, 3, 2), np.float32))


def test_sobel_constant_and_ramp():
    gx, gy = sobel_gradients(np.full((6, 7), 3.0))
    assert np.all(gx[1:-1, 1:-1] == 0) and np.all(gy[1:-1, 1:-1] == 0)
    step = 0.5
    ramp = np.tile(np.arange(7) * step, (6, 1))
    gx, gy = sobel_gradients(ramp)
    np.testing.assert_allclose(gx[1:-1, 1:-1], 8 * step)
    np.testing.assert_allclose(gy[1:-1, 1:-1], 0.0)


def test_sobel_transpose_symmetry():
    img = np.random.default_rng(2).random((9, 13))
    gx, gy = sobel_gradients(img)
    tx, ty = sobel_gradients(img.T)
    np.testing.assert_allclose(tx, gy.T, atol=1e-12)
    np.testing.assert_allclose(ty, gx.T, atol=1e-12)


def test_sobel_matches_stencil_oracle_200_cases():
    rng = np.random.default_rng(9)
    for _ in range(200):
        img = rng.standard_normal(tuple(int(v) for v in rng.integers(1, 10, size=2)))
        gx, gy = sobel_gradients(img)
        ox, oy = naive_sobel(img)
        np.testing.assert_allclose(gx, ox, atol=1e-6)
        np.testing.assert_allclose(gy, oy, atol=1e-6)


def test_sobel_batched_shape():
    x = np.random.default_rng(0).random((3, 1, 5, 6)).astype(np.float32)
    gx, gy = sobel_gradients(x)
    assert gx.shape == x.shape
    with pytest.raises(ShapeError):
        sobel_gradients(np.zeros((1, 2, 5, 5)))


def test_as_tensor_rules():
    assert as_tensor(np.zeros((3, 4))).shape == (1, 1, 3, 4)
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 1, 3, 3), np.float32))


@settings(max_examples=50, deadline=None)
@given(r=st.integers(1, 4), c=st.integers(1, 3), h=st.integers(1, 6), w=st.integers(1, 6))
def test_space_to_depth_inverse_property(r, c, h, w):
    x = np.arange(c * h * w * r * r, dtype=np.float32).reshape(1, c, h * r, w * r)
    np.testing.assert_array_equal(pixel_shuffle(space_to_depth(x, r), r), x)
