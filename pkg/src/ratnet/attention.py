"""Region-masked multi-head attention and the two transformer layer types.

``mh_masked_attention`` is the batched formulation: one dense N x N logit
matrix per head with the region bias added before softmax.
``gathered_region_attention`` is the loop formulation it replaces; it runs
plain attention on each region's rows separately and serves as the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import ConfigError, DimensionError
from .region import DEFAULT_LAMBDA, AttentionBias, attention_bias, grid_partition
from .tensor import Tensor

SCALE_MODES = ("head-dim", "literal-heads")


@dataclass
class AttnParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @property
    def channels(self) -> int:
        return self.wq.shape[0]


@dataclass
class TransformerLayerParams:
    norm1_g: Tensor
    norm1_b: Tensor
    attn: AttnParams
    norm2_g: Tensor
    norm2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


def named_tensors(obj, prefix: str = ""):
    """Yield ``(dotted_name, Tensor)`` for every tensor field, recursing into params dataclasses."""
    for f in fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, Tensor):
            yield prefix + f.name, val
        elif isinstance(val, (AttnParams, TransformerLayerParams)):
            yield from named_tensors(val, f"{prefix}{f.name}.")


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def init_attn_params(c: int, heads: int, rng: np.random.Generator, dtype=None, zero_out: bool = False) -> AttnParams:
    if heads < 1 or c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    dtype = dtype or T.get_default_dtype()
    ws = [_uniform(rng, (c, c), c, dtype) for _ in range(4)]
    if zero_out:
        ws[3] = _zeros((c, c), dtype)
    bs = [_zeros((c,), dtype) for _ in range(4)]
    return AttnParams(ws[0], bs[0], ws[1], bs[1], ws[2], bs[2], ws[3], bs[3], heads)


def init_layer_params(
    c: int, heads: int, mlp_ratio: int, rng: np.random.Generator, dtype=None, zero_out: bool = False
) -> TransformerLayerParams:
    dtype = dtype or T.get_default_dtype()
    hidden = mlp_ratio * c
    attn = init_attn_params(c, heads, rng, dtype, zero_out=zero_out)
    fc1_w = _uniform(rng, (c, hidden), c, dtype)
    fc2_w = _zeros((hidden, c), dtype) if zero_out else _uniform(rng, (hidden, c), hidden, dtype)
    ones = lambda n: Tensor(np.ones(n), requires_grad=True, dtype=dtype)  # noqa: E731
    return TransformerLayerParams(
        ones(c), _zeros((c,), dtype), attn, ones(c), _zeros((c,), dtype),
        fc1_w, _zeros((hidden,), dtype), fc2_w, _zeros((c,), dtype),
    )


def attn_scale(channels: int, heads: int, scale_mode: str = "head-dim") -> float:
    """Logit scale: 1/sqrt(C'/heads), or 1/sqrt(heads) for the literal reading."""
    if scale_mode == "head-dim":
        return 1.0 / math.sqrt(channels // heads)
    if scale_mode == "literal-heads":
        return 1.0 / math.sqrt(heads)
    raise ConfigError(f"unknown scale_mode {scale_mode!r}; expected one of {SCALE_MODES}")


def _split_heads(t: Tensor, heads: int) -> Tensor:
    # (..., T, C) -> (..., heads, T, C/heads)
    *lead, n, c = t.shape
    t = T.reshape(t, (*lead, n, heads, c // heads))
    k = len(lead)
    return T.permute(t, (*range(k), k + 1, k, k + 2))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, dh = t.shape
    k = len(lead)
    t = T.permute(t, (*range(k), k + 1, k, k + 2))
    return T.reshape(t, (*lead, n, h * dh))


def mh_masked_attention(
    x: Tensor, bias: AttentionBias | None, p: AttnParams, scale_mode: str = "head-dim"
) -> Tensor:
    """softmax(D + Q_h K_h^T * scale) V_h per head, concatenated and output-projected.

    ``x`` is (N, C) or (B, N, C); ``D`` comes from ``bias`` and is shared by
    all heads (and all leading batch entries).  ``bias=None`` is global attention.
    """
    c = x.shape[-1]
    if c != p.channels:
        raise DimensionError(f"attention: input has {c} channels, params expect {p.channels}")
    if c % p.heads:
        raise ConfigError(f"channels {c} not divisible by heads {p.heads}")
    if bias is not None and len(bias) != x.shape[-2]:
        raise DimensionError(f"attention: bias covers {len(bias)} tokens, input has {x.shape[-2]}")
    q = _split_heads(T.linear(x, p.wq, p.bq), p.heads)
    k = _split_heads(T.linear(x, p.wk, p.bk), p.heads)
    v = _split_heads(T.linear(x, p.wv, p.bv), p.heads)
    kt = T.permute(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))
    logits = T.mul_scalar(T.matmul(q, kt), attn_scale(c, p.heads, scale_mode))
    if bias is None:
        a = T.softmax_lastdim(logits)
    else:
        a = T.region_softmax(logits, bias.latent_labels, bias.lam)
    return T.linear(_merge_heads(T.matmul(a, v)), p.wo, p.bo)


def canonical_region_order(x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel order grouped by region, rows sorted lexicographically inside each region.

    Returns ``(order, bounds)`` where region ``r`` occupies
    ``order[bounds[r]:bounds[r + 1]]``.  Sorting by content makes the result
    depend only on which rows share a region, not on where they sit.
    """
    labels = np.asarray(labels, dtype=np.int64)
    keys = tuple(x[:, j] for j in range(x.shape[1] - 1, -1, -1)) + (labels,)
    order = np.lexsort(keys)
    _, counts = np.unique(labels, return_counts=True)
    bounds = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return order, bounds


def gathered_region_attention(x, labels, p: AttnParams, scale_mode: str = "head-dim") -> Tensor:
    """Unmasked attention run separately on each region's rows; forward only."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    labels = np.asarray(labels)
    if xd.ndim != 2 or len(labels) != xd.shape[0]:
        raise DimensionError(f"gathered attention: x {xd.shape} vs {len(labels)} labels")
    c = xd.shape[1]
    if c % p.heads:
        raise ConfigError(f"channels {c} not divisible by heads {p.heads}")
    order, bounds = canonical_region_order(xd, labels)
    xs = np.ascontiguousarray(xd[order])
    ws = [t.data for t in (p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo)]
    ys = _kernels.gathered_attention(xs, bounds, *ws, p.heads, attn_scale(c, p.heads, scale_mode))
    out = np.empty_like(ys)
    out[order] = ys
    return Tensor(out)


def _mlp(y: Tensor, lp: TransformerLayerParams) -> Tensor:
    h = T.gelu(T.linear(y, lp.fc1_w, lp.fc1_b))
    return T.linear(h, lp.fc2_w, lp.fc2_b)


def rmsa_layer(
    x: Tensor,
    bias: AttentionBias | None,
    lp: TransformerLayerParams,
    scale_mode: str = "head-dim",
    mlp: bool = True,
) -> Tensor:
    """Pre-norm transformer layer: ``y = x + MHA(LN(x))``, ``out = y + MLP(LN(y))``.

    With ``mlp=False`` the attention sublayer output ``y`` is returned.
    """
    y = T.add(x, mh_masked_attention(T.layer_norm(x, lp.norm1_g, lp.norm1_b), bias, lp.attn, scale_mode))
    if not mlp:
        return y
    return T.add(y, _mlp(T.layer_norm(y, lp.norm2_g, lp.norm2_b), lp))


def window_partition(x: Tensor, win: int) -> Tensor:
    """(H, W, C) -> (num_windows, win*win, C), windows in row-major order."""
    h, w, c = x.shape
    t = T.reshape(x, (h // win, win, w // win, win, c))
    t = T.permute(t, (0, 2, 1, 3, 4))
    return T.reshape(t, ((h // win) * (w // win), win * win, c))


def window_merge(t: Tensor, h: int, w: int, win: int) -> Tensor:
    c = t.shape[-1]
    t = T.reshape(t, (h // win, w // win, win, win, c))
    t = T.permute(t, (0, 2, 1, 3, 4))
    return T.reshape(t, (h, w, c))


def wmsa_layer(
    x: Tensor,
    win: int,
    lp: TransformerLayerParams,
    scale_mode: str = "head-dim",
    mlp: bool = True,
    fast: bool = True,
    lam: float = DEFAULT_LAMBDA,
) -> Tensor:
    """Window attention layer on an (H', W', C) grid.

    ``fast=True`` batches the windows by reshaping; ``fast=False`` runs the
    region layer with a grid partition as bias.  Both give the same result.
    """
    if x.ndim != 3:
        raise DimensionError(f"wmsa_layer expects (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if win < 1 or h % win or w % win:
        raise DimensionError(f"wmsa_layer: grid {(h, w)} not divisible by window {win}")
    if not fast:
        bias = attention_bias(grid_partition(h, w, win), lam)
        out = rmsa_layer(T.reshape(x, (h * w, c)), bias, lp, scale_mode, mlp=mlp)
        return T.reshape(out, (h, w, c))
    out = rmsa_layer(window_partition(x, win), None, lp, scale_mode, mlp=mlp)
    return window_merge(out, h, w, win)
