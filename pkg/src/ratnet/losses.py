"""Focal region loss, L1, PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError
from .region import RegionPartition
from .tensor import Tensor

PSNR_CAP = 99.0


@dataclass
class RegionLossReport:
    region_mae: np.ndarray
    weights: np.ndarray
    total: float
    gamma: float
    delta: float


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_pair(pred, target, part: RegionPartition | None = None):
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise DimensionError(f"pred {p.shape} and target {t.shape} differ")
    if part is not None and p.shape[-2:] != (part.height, part.width):
        raise DimensionError(f"partition {(part.height, part.width)} does not match image {p.shape[-2:]}")
    if np.isnan(p).any() or np.isnan(t).any():
        raise NumericError("NaN in loss inputs")
    return p, t


def region_mae(pred, target, part: RegionPartition) -> np.ndarray:
    """Mean absolute error over each region's pixels (all leading channels included)."""
    p, t = _check_pair(pred, target, part)
    err = np.abs(p.astype(np.float64) - t).reshape(-1, part.height * part.width).sum(axis=0)
    lab = part.labels.reshape(-1)
    per_pixel = p.size // (part.height * part.width)
    sums = np.bincount(lab, weights=err, minlength=part.num_regions)
    counts = np.bincount(lab, minlength=part.num_regions) * per_pixel
    return sums / counts


def region_weights(pred, target, part: RegionPartition, delta: float = 1.0) -> np.ndarray:
    """``w_i = e_i**delta / max_j e_j**delta``; all zeros when every region is exact."""
    if delta < 0:
        raise DimensionError(f"delta must be >= 0, got {delta}")
    e = region_mae(pred, target, part)
    if not (e > 0).any():
        return np.zeros_like(e)
    powed = e**delta
    return powed / powed.max()


def l1(pred: Tensor, target) -> Tensor:
    _check_pair(pred, target)
    return T.mean(T.abs_(T.sub(pred, target)))


def focal_region_loss(
    pred: Tensor,
    target,
    part: RegionPartition,
    gamma: float = 1e-3,
    delta: float = 1.0,
    weights: np.ndarray | None = None,
) -> tuple[Tensor, RegionLossReport]:
    """Mean over pixels of ``(1 + gamma * w[region]) * |pred - target|``.

    The region weights are computed from the current errors and then held
    constant for the backward pass.  Pass ``weights`` to freeze them explicitly.
    """
    if gamma < 0:
        raise DimensionError(f"gamma must be >= 0, got {gamma}")
    _check_pair(pred, target, part)
    e = region_mae(pred, target, part)
    w = region_weights(pred, target, part, delta) if weights is None else np.asarray(weights, dtype=np.float64)
    scale = (1.0 + gamma * w[part.labels]).astype(pred.dtype)
    loss = T.mean(T.mul(T.abs_(T.sub(pred, target)), Tensor(scale, dtype=pred.dtype)))
    return loss, RegionLossReport(e, w, float(loss.data), gamma, delta)


def psnr(pred, target, peak: float = 1.0) -> float:
    p, t = _check_pair(pred, target)
    mse = float(np.mean((p.astype(np.float64) - t) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(pred, target, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Gaussian-window SSIM over the valid region, averaged over channel maps."""
    p, t = _check_pair(pred, target)
    p = p.astype(np.float64).reshape(-1, *p.shape[-2:])
    t = t.astype(np.float64).reshape(-1, *t.shape[-2:])
    size = min(win, p.shape[-1], p.shape[-2])
    if size % 2 == 0:
        size -= 1
    g = _gaussian(size, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for a, b in zip(p, t):
        mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
        saa = _filter_valid(a * a, g) - mu_a * mu_a
        sbb = _filter_valid(b * b, g) - mu_b * mu_b
        sab = _filter_valid(a * b, g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))
