import math

import numpy as np
import pytest

from ratnet import tensor as T
from ratnet.errors import DimensionError, NumericError
from ratnet.losses import PSNR_CAP, focal_region_loss, l1, psnr, region_mae, region_weights, ssim
from ratnet.region import RegionPartition
from ratnet.tensor import Tensor


def two_pixel():
    part = RegionPartition(np.array([[0], [1]]), 2)
    target = Tensor(np.zeros((1, 1, 2, 1)))
    pred = Tensor(np.array([0.1, -0.4]).reshape(1, 1, 2, 1))
    return pred, target, part


def random_case(rng, h=6, w=5, L=3):
    part = RegionPartition.from_labels(rng.integers(0, L, size=(h, w)))
    pred = Tensor(rng.uniform(size=(1, 1, h, w)))
    target = Tensor(rng.uniform(size=(1, 1, h, w)))
    return pred, target, part


def test_region_mae_by_hand():
    pred, target, part = two_pixel()
    np.testing.assert_allclose(region_mae(pred, target, part), [0.1, 0.4])


def test_weights_hand_example():
    pred, target, part = two_pixel()
    np.testing.assert_allclose(region_weights(pred, target, part, 1.0), [0.25, 1.0])


def test_weights_equal_errors_all_one():
    part = RegionPartition(np.array([[0, 1], [2, 2]]), 3)
    pred = Tensor(np.full((1, 1, 2, 2), 0.3))
    np.testing.assert_array_equal(region_weights(pred, Tensor(np.zeros((1, 1, 2, 2))), part), [1.0, 1.0, 1.0])


def test_weights_zero_when_exact():
    _, target, part = two_pixel()
    w = region_weights(target, target, part)
    np.testing.assert_array_equal(w, [0.0, 0.0])
    loss, rep = focal_region_loss(target, target, part, gamma=1.0)
    assert float(loss.data) == 0.0


def test_focal_hand_example():
    pred, target, part = two_pixel()
    loss, rep = focal_region_loss(pred, target, part, gamma=1.0, delta=1.0)
    assert float(loss.data) == pytest.approx((1.25 * 0.1 + 2.0 * 0.4) / 2, rel=1e-12)
    assert rep.total == float(loss.data)
    np.testing.assert_allclose(rep.weights, [0.25, 1.0])


def test_gamma_zero_is_l1_bit_exact():
    rng = np.random.default_rng(0)
    for _ in range(30):
        pred, target, part = random_case(rng)
        assert focal_region_loss(pred, target, part, gamma=0.0)[0].data == l1(pred, target).data


def test_monotone_in_gamma():
    rng = np.random.default_rng(1)
    pred, target, part = random_case(rng)
    vals = [float(focal_region_loss(pred, target, part, gamma=g)[0].data) for g in (0, 1e-3, 0.1, 1, 10)]
    assert vals == sorted(vals)


def test_delta_sharpens_weights():
    rng = np.random.default_rng(2)
    pred, target, part = random_case(rng)
    w1 = region_weights(pred, target, part, 1.0)
    w3 = region_weights(pred, target, part, 3.0)
    assert w1.max() == w3.max() == 1.0
    assert (w3 <= w1 + 1e-15).all()


def test_weights_are_stop_gradient():
    """Gradient equals the fixed-weight gradient: (1 + gamma w) sign(d) / n."""
    rng = np.random.default_rng(3)
    pv = rng.uniform(size=(1, 1, 4, 4))
    tv = rng.uniform(size=(1, 1, 4, 4))
    part = RegionPartition.from_labels(rng.integers(0, 3, size=(4, 4)))
    pred = Tensor(pv, requires_grad=True)
    loss, rep = focal_region_loss(pred, Tensor(tv), part, gamma=0.5)
    T.backward(loss)
    ref = (1 + 0.5 * rep.weights[part.labels]) * np.sign(pv - tv) / pv.size
    np.testing.assert_allclose(pred.grad, ref, rtol=1e-12)


def test_negative_gamma_and_nan_rejected():
    pred, target, part = two_pixel()
    with pytest.raises(DimensionError):
        focal_region_loss(pred, target, part, gamma=-1.0)
    bad = Tensor(np.array([np.nan, 0.0]).reshape(1, 1, 2, 1))
    with pytest.raises(NumericError):
        focal_region_loss(bad, target, part)


def test_shape_mismatch_rejected():
    with pytest.raises(DimensionError):
        l1(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


# ---------------------------------------------------------------- metrics


def test_identical_images_cap():
    x = np.random.default_rng(4).uniform(size=(16, 16))
    assert psnr(x, x) == PSNR_CAP == 99.0
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_psnr_closed_form():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # MSE = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    a, b = 0.2, 0.4
    c1 = (0.01) ** 2
    ref = (2 * a * b + c1) / (a * a + b * b + c1)  # structure term is c2/c2 = 1
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(ref, rel=1e-9)


def test_ssim_matches_direct_window_loop():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(13, 14)), rng.uniform(size=(13, 14))
    x = np.arange(11) - 5
    g = np.exp(-(x**2) / (2 * 1.5**2))
    g2 = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(13 - 10):
        for j in range(14 - 10):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = (g2 * pa).sum(), (g2 * pb).sum()
            va = (g2 * (pa - ma) ** 2).sum()
            vb = (g2 * (pb - mb) ** 2).sum()
            cov = (g2 * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(float(np.mean(vals)), rel=1e-10)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(6)
    hq = rng.uniform(0.3, 0.7, size=(32, 32))
    vals = [psnr(hq + rng.normal(size=hq.shape) * s, hq) for s in (0.01, 0.05, 0.1, 0.2)]
    assert vals == sorted(vals, reverse=True)
    assert vals[2] == pytest.approx(20.0, abs=0.5)
    assert math.isfinite(vals[-1])
