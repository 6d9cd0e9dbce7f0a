"""Finite-difference checks for every differentiable op and the end-to-end model.

All checks run in float64.  The error measure is the max-norm relative error,
taken jointly over every input of an op,
``max|g_ad - g_fd| / max(max|g_ad|, max|g_fd|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import init_attn_params, init_layer_params, mh_masked_attention, named_tensors, rmsa_layer, wmsa_layer
from .losses import focal_region_loss, region_weights
from .model import RATConfig, build_model, conv_block, _conv_block, forward
from .region import RegionPartition, attention_bias
from .tensor import Tensor

OP_TOL = 1e-4
E2E_TOL = 1e-3


@dataclass
class GradCheck:
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} rel_err={self.rel_err:.3e} tol={self.tol:.0e}"


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max()) / scale


def _fd_inplace(f: Callable[[], float], t: Tensor, eps: float, coords=None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``t.data``, perturbing it in place."""

    def g(probe: Tensor) -> float:
        saved = t.data
        t.data = probe.data
        try:
            return f()
        finally:
            t.data = saved

    return T.finite_diff_grad(g, t, eps, coords)


def check_fn(name: str, fn: Callable[..., Tensor], inputs: list[Tensor], rng, eps: float = 1e-6) -> GradCheck:
    """Compare backward against finite differences of ``sum(fn(*inputs) * R)``."""
    out = fn(*inputs)
    weight = Tensor(rng.normal(size=out.shape))

    def scalar():
        with T.no_grad():
            return float(T.sum_(T.mul(fn(*inputs), weight)).data)

    for t in inputs:
        t.grad = None
    T.backward(T.sum_(T.mul(fn(*inputs), weight)))
    ad, fd = [], []
    for t in inputs:
        if not t.requires_grad:
            continue
        ad.append((t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1))
        fd.append(_fd_inplace(scalar, t, eps).reshape(-1))
    # one error per op over all its inputs, so exactly-zero gradients (e.g. key bias) stay well defined
    return GradCheck(name, rel_err(np.concatenate(ad), np.concatenate(fd)), OP_TOL)


def _p(rng, *shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.sign(x) * (0.2 + np.abs(x))
    return Tensor(x, requires_grad=True, dtype=np.float64)


def op_cases(rng) -> list[tuple[str, Callable, list[Tensor]]]:
    """(name, fn, inputs) for every differentiable primitive and composite layer."""
    labels = rng.integers(0, 3, size=6)
    rng_bias = rng.normal(size=(5,))
    return [
        ("add", T.add, [_p(rng, 3, 4), _p(rng, 4)]),
        ("sub", T.sub, [_p(rng, 3, 4), _p(rng, 3, 4)]),
        ("mul", T.mul, [_p(rng, 3, 4), _p(rng, 3, 1)]),
        ("mul_scalar", lambda a: T.mul_scalar(a, -1.7), [_p(rng, 5)]),
        ("abs", T.abs_, [_p(rng, 7, away_from_zero=True)]),
        ("gelu", T.gelu, [_p(rng, 2, 6)]),
        ("sum", T.sum_, [_p(rng, 3, 3)]),
        ("mean", T.mean, [_p(rng, 4, 2)]),
        ("abs_sum", T.abs_sum, [_p(rng, 9, away_from_zero=True)]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), [_p(rng, 3, 4)]),
        ("permute", lambda a: T.permute(a, (2, 0, 1)), [_p(rng, 2, 3, 4)]),
        ("crop", lambda a: T.crop(a, 3, 2), [_p(rng, 1, 2, 4, 4)]),
        ("pixel_unshuffle", lambda a: T.pixel_unshuffle(a, 2), [_p(rng, 1, 2, 4, 4)]),
        ("pixel_shuffle", lambda a: T.pixel_shuffle(a, 2), [_p(rng, 1, 8, 2, 3)]),
        ("matmul", T.matmul, [_p(rng, 2, 3, 4), _p(rng, 4, 5)]),
        ("linear", T.linear, [_p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)]),
        ("softmax_lastdim", lambda a: T.softmax_lastdim(a, Tensor(rng_bias)), [_p(rng, 2, 5)]),
        ("region_softmax", lambda a: T.region_softmax(a, labels, -1000.0), [_p(rng, 2, 6, 6)]),
        ("layer_norm", lambda a, g, b: T.layer_norm(a, g, b), [_p(rng, 3, 5), _p(rng, 5), _p(rng, 5)]),
        ("conv3x3", T.conv3x3, [_p(rng, 1, 2, 5, 4), _p(rng, 3, 2, 3, 3), _p(rng, 3)]),
        ("conv1x1", T.conv2d, [_p(rng, 1, 3, 3, 3), _p(rng, 2, 3, 1, 1), _p(rng, 2)]),
    ]


def layer_cases(rng) -> list[tuple[str, Callable, list[Tensor]]]:
    with T.default_dtype(np.float64):
        ap = init_attn_params(8, 2, rng)
        lp = init_layer_params(8, 2, 2, rng)
        cb = _conv_block(rng, 3, np.float64)
    for t in (ap.bq, ap.bk, ap.bv, ap.bo, lp.fc2_b, lp.norm1_b, cb.b2):
        t.data = rng.normal(size=t.shape) * 0.1
    labels = rng.integers(0, 3, size=8)
    bias = attention_bias(RegionPartition.from_labels(labels.reshape(2, 4)), -1000.0)
    x_attn = _p(rng, 8, 8)
    x_grid = _p(rng, 4, 4, 8)
    x_img = _p(rng, 1, 3, 4, 4)
    return [
        ("mh_masked_attention", lambda x, *_: mh_masked_attention(x, bias, ap), [x_attn, *[t for _, t in named_tensors(ap)]]),
        ("mh_attention_global", lambda x, *_: mh_masked_attention(x, None, ap), [x_attn, ap.wq, ap.wv]),
        ("rmsa_layer", lambda x, *_: rmsa_layer(x, bias, lp), [x_attn, *[t for _, t in named_tensors(lp)]]),
        ("wmsa_layer", lambda x, *_: wmsa_layer(x, 2, lp), [x_grid, lp.attn.wk, lp.fc1_w, lp.norm2_g]),
        ("conv_block", lambda x, *_: conv_block(x, cb), [x_img, *[t for _, t in named_tensors(cb)]]),
    ]


def check_focal_loss(rng) -> GradCheck:
    part = RegionPartition.from_labels(rng.integers(0, 3, size=(4, 5)))
    pred = _p(rng, 1, 1, 4, 5)
    target = Tensor(pred.data + np.sign(rng.normal(size=(1, 1, 4, 5))) * rng.uniform(0.05, 0.5, size=(1, 1, 4, 5)))
    w = region_weights(pred, target, part, 1.0)

    def f(p):
        return float(focal_region_loss(p, target, part, gamma=0.7, delta=1.0, weights=w)[0].data)

    loss, _ = focal_region_loss(pred, target, part, gamma=0.7, delta=1.0, weights=w)
    T.backward(loss)
    return GradCheck("focal_region_loss", rel_err(pred.grad, T.finite_diff_grad(f, pred, 1e-6)), OP_TOL)


TINY_E2E = RATConfig(in_channels=1, base_channels=4, n1=1, n2=1, n3=1, n4=1, n5=1, heads=2, win=2)


def check_end_to_end(seed: int = 0, n_params: int = 100, cfg: RATConfig = TINY_E2E, size: int = 16) -> GradCheck:
    """Focal loss through the whole network vs finite differences on sampled weights."""
    rng = np.random.default_rng(seed)
    m = build_model(cfg, seed=seed, dtype=np.float64)
    params = m.named_parameters()
    # move off the identity init so every weight influences the output
    for t in params.values():
        t.data = t.data + rng.normal(scale=0.05, size=t.shape)
    lq = Tensor(rng.uniform(size=(1, cfg.in_channels, size, size)), dtype=np.float64)
    hq = Tensor(rng.uniform(size=lq.shape), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    part = RegionPartition.from_labels((yy > size // 3).astype(int) + 2 * (xx > size // 2))
    with T.no_grad():
        w = region_weights(forward(m, lq, part), hq, part, 1.0)

    def loss_value() -> float:
        with T.no_grad():
            return float(focal_region_loss(forward(m, lq, part), hq, part, 0.5, 1.0, weights=w)[0].data)

    loss, _ = focal_region_loss(forward(m, lq, part), hq, part, 0.5, 1.0, weights=w)
    grads = T.backward(loss)
    names = list(params)
    picks = [(n, int(rng.integers(params[n].data.size))) for n in names]
    while len(picks) < n_params:
        n = names[rng.integers(len(names))]
        picks.append((n, int(rng.integers(params[n].data.size))))
    ad, fd = [], []
    for n, i in picks:
        t = params[n]
        g = grads.get(t)
        ad.append(0.0 if g is None else g.reshape(-1)[i])
        fd.append(_fd_inplace(loss_value, t, 1e-6, coords=[i]).reshape(-1)[i])
    return GradCheck(f"end_to_end[{len(picks)} params]", rel_err(np.array(ad), np.array(fd)), E2E_TOL)


def run_grad_suite(seeds: int = 10, e2e_params: int = 100) -> list[GradCheck]:
    """Worst-case error per op over ``seeds`` random draws, plus the end-to-end check."""
    worst: dict[str, GradCheck] = {}
    for s in range(seeds):
        rng = np.random.default_rng(1000 + s)
        results = [check_fn(n, f, xs, rng) for n, f, xs in op_cases(rng) + layer_cases(rng)]
        results.append(check_focal_loss(rng))
        for r in results:
            if r.name not in worst or r.rel_err > worst[r.name].rel_err:
                worst[r.name] = r
    out = list(worst.values())
    out.append(check_end_to_end(seed=0, n_params=e2e_params))
    return out

