import io
import math

import numpy as np
import pytest

from ratnet import tensor as T
from ratnet.errors import ContractError, DimensionError, FormatError
from ratnet.tensor import Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- naive oracles


def loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def loop_conv(x, w, b):
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((bsz, o, h, wd))
    for n in range(bsz):
        for oc in range(o):
            for y in range(h):
                for xx in range(wd):
                    s = b[oc]
                    for ic in range(c):
                        for dy in range(k):
                            for dx in range(k):
                                yy, xs = y + dy - p, xx + dx - p
                                if 0 <= yy < h and 0 <= xs < wd:
                                    s += x[n, ic, yy, xs] * w[oc, ic, dy, dx]
                    out[n, oc, y, xx] = s
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(T.matmul(t64(np.eye(3)), t64(a)).data, a)


def test_matmul_small_example():
    out = T.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]])).data
    np.testing.assert_array_equal(out, [[3], [7]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    got = T.matmul(t64(a), t64(b)).data
    ref = loop_matmul(a, b)
    assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-6


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# ---------------------------------------------------------------- softmax


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax_lastdim(t64([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_lambda_suppression():
    y = T.softmax_lastdim(t64([0.0, 0.0]), t64([0.0, -1000.0])).data
    assert y[0] == pytest.approx(1.0)
    assert y[1] <= 1e-300


def test_softmax_normalised():
    y = T.softmax_lastdim(t64(np.random.default_rng(2).normal(size=7) * 5)).data
    assert abs(y.sum() - 1.0) < 1e-6


def test_region_softmax_matches_explicit_bias():
    rng = np.random.default_rng(3)
    labels = np.array([0, 1, 1, 2, 0])
    x = rng.normal(size=(2, 5, 5))
    bias = np.where(labels[:, None] == labels[None, :], 0.0, -1000.0)
    ref = T.softmax_lastdim(t64(x), t64(bias)).data
    np.testing.assert_allclose(T.region_softmax(t64(x), labels, -1000.0).data, ref, rtol=1e-12, atol=1e-300)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero():
    y = T.layer_norm(t64(np.full((2, 6), 3.5)), t64(np.ones(6)), t64(np.zeros(6))).data
    np.testing.assert_array_equal(y, 0.0)


def test_layer_norm_mean_equals_shift():
    rng = np.random.default_rng(4)
    shift = rng.normal(size=8)
    y = T.layer_norm(t64(rng.normal(size=(5, 8))), t64(np.ones(8)), t64(shift)).data
    np.testing.assert_allclose(y.mean(axis=-1), shift.mean(), atol=1e-12)
    # unit variance after the gain, with shift removed
    np.testing.assert_allclose((y - shift).std(axis=-1), 1.0, rtol=1e-4)


def test_layer_norm_grad_vs_finite_differences():
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(3, 5)), grad=True)
    g, b = t64(rng.normal(size=5)), t64(rng.normal(size=5))
    r = rng.normal(size=(3, 5))
    T.backward(T.sum_(T.mul(T.layer_norm(x, g, b), t64(r))))
    fd = T.finite_diff_grad(lambda z: float((T.layer_norm(z, g, b).data * r).sum()), x, 1e-6)
    assert np.abs(x.grad - fd).max() / np.abs(fd).max() < 1e-4


# ---------------------------------------------------------------- conv


def test_conv_delta_kernel_identity():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv3x3(t64(x), t64(w), t64(np.zeros(3))).data, x)


def test_conv_box_sum():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    y = T.conv3x3(t64(x), t64(np.ones((1, 1, 3, 3))), t64(np.zeros(1))).data
    assert y[0, 0, 2, 2] == x[0, 0, 1:4, 1:4].sum()
    # corner only sees the in-bounds 2x2 block
    assert y[0, 0, 0, 0] == x[0, 0, :2, :2].sum()


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_six_loop(k):
    rng = np.random.default_rng(7 + k)
    x, w, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(2, 3, k, k)), rng.normal(size=2)
    ref = loop_conv(x, w, b)
    got = T.conv2d(t64(x), t64(w), t64(b)).data
    assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-5


def test_conv_rejects_even_kernel():
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.ones((1, 1, 4, 4))), t64(np.ones((1, 1, 2, 2))))


# ---------------------------------------------------------------- pixel shuffle


def test_pixel_unshuffle_shape():
    assert T.pixel_unshuffle(t64(np.ones((1, 2, 4, 4))), 2).shape == (1, 8, 2, 2)


def test_pixel_unshuffle_layout():
    out = T.pixel_unshuffle(t64([[[[1, 2], [3, 4]]]]), 2).data
    np.testing.assert_array_equal(out[0, :, 0, 0], [1, 2, 3, 4])


def test_pixel_unshuffle_layout_by_definition():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 3, 6, 4))
    r = 2
    out = T.pixel_unshuffle(t64(x), r).data
    for c in range(3):
        for i in range(r):
            for j in range(r):
                np.testing.assert_array_equal(out[0, c * r * r + i * r + j], x[0, c, i::r, j::r])


def test_pixel_shuffle_roundtrip_exact():
    x = np.random.default_rng(9).normal(size=(1, 2, 8, 4))
    back = T.pixel_shuffle(T.pixel_unshuffle(t64(x), 2), 2).data
    np.testing.assert_array_equal(back, x)


# ---------------------------------------------------------------- small ops


def test_linear_identity():
    x = np.random.default_rng(10).normal(size=(4, 3))
    np.testing.assert_array_equal(T.linear(t64(x), t64(np.eye(3)), t64(np.zeros(3))).data, x)


def test_gelu_zero_and_tanh_form():
    assert T.gelu(t64([0.0])).data[0] == 0.0
    v = 1.3
    ref = 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))
    assert T.gelu(t64([v])).data[0] == pytest.approx(ref, rel=1e-12)


def test_abs_sum():
    assert float(T.abs_sum(t64([-1.0, 2.0, -3.0])).data) == 6.0


def test_broadcast_add_and_crop():
    a = T.add(t64(np.ones((2, 3))), t64([1.0, 2.0, 3.0])).data
    np.testing.assert_array_equal(a, [[2, 3, 4], [2, 3, 4]])
    x = np.arange(32.0).reshape(1, 2, 4, 4)
    np.testing.assert_array_equal(T.crop(t64(x), 3, 2).data, x[:, :, :3, :2])


def test_zero_size_dimension_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(11).normal(size=(2, 3)), grad=True)
    T.backward(T.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    xv = np.random.default_rng(12).normal(size=(4,))
    x = t64(xv, grad=True)
    T.backward(T.sum_(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * xv, rtol=1e-15)


def test_backward_fan_out_accumulates():
    x = t64([1.5, -2.0], grad=True)
    y = T.add(T.mul_scalar(x, 3.0), T.mul(x, x))
    T.backward(T.sum_(y))
    np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data)


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        T.backward(t64(np.ones(3), grad=True))


def test_no_grad_builds_no_graph():
    x = t64([1.0, 2.0], grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert y._parents == ()


def test_finite_diff_of_sum_is_ones():
    x = t64(np.random.default_rng(13).normal(size=(3, 2)))
    g = T.finite_diff_grad(lambda z: float(z.data.sum()), x)
    np.testing.assert_allclose(g, 1.0, atol=1e-8)


def test_finite_diff_of_half_norm_is_x():
    xv = np.random.default_rng(14).normal(size=5)
    g = T.finite_diff_grad(lambda z: 0.5 * float((z.data**2).sum()), t64(xv))
    np.testing.assert_allclose(g, xv, atol=1e-6)


# ---------------------------------------------------------------- RATT


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_ratt_roundtrip(dtype):
    x = np.random.default_rng(15).normal(size=(2, 3, 4)).astype(dtype)
    buf = io.BytesIO()
    T.write_tensor(buf, Tensor(x))
    raw = buf.getvalue()
    assert raw[:4] == b"RATT"
    assert len(raw) == 4 + 8 + 3 * 8 + 1 + x.nbytes
    back = T.read_tensor(io.BytesIO(raw))
    assert back.dtype == dtype
    np.testing.assert_array_equal(back.data, x)


def test_ratt_truncated_and_bad_magic():
    buf = io.BytesIO()
    T.write_tensor(buf, Tensor(np.ones((2, 2))))
    raw = buf.getvalue()
    with pytest.raises(FormatError):
        T.read_tensor(io.BytesIO(raw[:-3]))
    with pytest.raises(FormatError):
        T.read_tensor(io.BytesIO(b"XXXX" + raw[4:]))
