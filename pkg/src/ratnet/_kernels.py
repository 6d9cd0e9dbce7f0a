"""Hot inner loops, each in two flavours: numba ``@njit`` and plain numpy.

The active backend is chosen once at import time.  Set ``RATNET_DISABLE_NUMBA=1``
(or run without numba installed) to force the numpy path.  Both implementations
stay importable through :data:`numpy_impl` and :data:`numba_impl` so the
benchmarks and tests can compare them side by side.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the system TBB is too old for numba; skip the probe and its warning
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

_DISABLED = os.environ.get("RATNET_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")
BACKEND = "numba" if HAS_NUMBA and not _DISABLED else "numpy"


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------


def _np_region_softmax(logits, labels, lam):
    """softmax(logits + D) over the last axis, D[p, q] = 0 if same label else lam."""
    same = labels[:, None] == labels[None, :]
    bias = np.where(same, 0.0, lam).astype(logits.dtype)
    z = logits + bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _np_dense_masked_core(q, k, v, labels, lam, scale):
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    return np.matmul(_np_region_softmax(logits, labels, lam), v)


def _np_attend(xr, wq, bq, wk, bk, wv, bv, wo, bo, heads, scale):
    n, c = xr.shape
    dh = c // heads
    q = (xr @ wq + bq).reshape(n, heads, dh).transpose(1, 0, 2)
    k = (xr @ wk + bk).reshape(n, heads, dh).transpose(1, 0, 2)
    v = (xr @ wv + bv).reshape(n, heads, dh).transpose(1, 0, 2)
    z = np.matmul(q, k.transpose(0, 2, 1)) * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=-1, keepdims=True)
    o = np.matmul(a, v).transpose(1, 0, 2).reshape(n, c)
    return o @ wo + bo


def _np_gathered_attention(xs, bounds, wq, bq, wk, bk, wv, bv, wo, bo, heads, scale):
    """Run unmasked attention independently on each contiguous segment of ``xs``."""
    out = np.empty_like(xs)
    for r in range(len(bounds) - 1):
        lo, hi = bounds[r], bounds[r + 1]
        out[lo:hi] = _np_attend(xs[lo:hi], wq, bq, wk, bk, wv, bv, wo, bo, heads, scale)
    return out


def _np_paint_smallest(masks, areas):
    """Index of the smallest covering mask per pixel (ties: lowest index), -1 if none."""
    n = masks.shape[0]
    winner = np.full(masks.shape[1:], -1, dtype=np.int64)
    # paint from lowest to highest priority; the last writer wins
    order = sorted(range(n), key=lambda i: (-int(areas[i]), -i))
    for i in order:
        winner[masks[i] != 0] = i
    return winner


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(parallel=True, cache=True)
    def _nb_region_softmax(logits, labels, lam):
        b, n, m = logits.shape
        out = np.empty_like(logits)
        for t in prange(b * n):
            h = t // n
            p = t % n
            lp = labels[p]
            row = logits[h, p]
            o = out[h, p]
            mx = row[0] if labels[0] == lp else row[0] + lam
            for j in range(m):
                z = row[j] if labels[j] == lp else row[j] + lam
                o[j] = z
                mx = max(mx, z)
            s = 0.0
            for j in range(m):
                e = np.exp(o[j] - mx)
                o[j] = e
                s += e
            inv = 1.0 / s
            for j in range(m):
                o[j] *= inv
        return out

    @njit(parallel=True, cache=True)
    def _nb_dense_masked_core(q, k, v, labels, lam, scale):
        h, n, dh = q.shape
        out = np.zeros_like(q)
        for t in prange(h * n):
            hh = t // n
            p = t % n
            lp = labels[p]
            row = np.empty(n, dtype=q.dtype)
            mx = -np.inf
            for j in range(n):
                s = 0.0
                for d in range(dh):
                    s += q[hh, p, d] * k[hh, j, d]
                z = s * scale + (0.0 if labels[j] == lp else lam)
                row[j] = z
                if z > mx:
                    mx = z
            tot = 0.0
            for j in range(n):
                e = np.exp(row[j] - mx)
                row[j] = e
                tot += e
            for j in range(n):
                w = row[j] / tot
                for d in range(dh):
                    out[hh, p, d] += w * v[hh, j, d]
        return out

    @njit(cache=True)
    def _nb_project(xr, w, b):
        n, c = xr.shape
        m = w.shape[1]
        out = np.empty((n, m), dtype=xr.dtype)
        for i in range(n):
            for o in range(m):
                s = b[o]
                for j in range(c):
                    s += xr[i, j] * w[j, o]
                out[i, o] = s
        return out

    @njit(parallel=True, cache=True)
    def _nb_gathered_attention(xs, bounds, wq, bq, wk, bk, wv, bv, wo, bo, heads, scale):
        n, c = xs.shape
        dh = c // heads
        out = np.empty_like(xs)
        for r in prange(len(bounds) - 1):
            lo = bounds[r]
            hi = bounds[r + 1]
            xr = xs[lo:hi]
            m = hi - lo
            q = _nb_project(xr, wq, bq)
            k = _nb_project(xr, wk, bk)
            v = _nb_project(xr, wv, bv)
            o = np.zeros((m, c), dtype=xs.dtype)
            row = np.empty(m, dtype=xs.dtype)
            for h in range(heads):
                off = h * dh
                for p in range(m):
                    mx = -np.inf
                    for j in range(m):
                        s = 0.0
                        for d in range(dh):
                            s += q[p, off + d] * k[j, off + d]
                        z = s * scale
                        row[j] = z
                        if z > mx:
                            mx = z
                    tot = 0.0
                    for j in range(m):
                        e = np.exp(row[j] - mx)
                        row[j] = e
                        tot += e
                    for j in range(m):
                        w = row[j] / tot
                        for d in range(dh):
                            o[p, off + d] += w * v[j, off + d]
            out[lo:hi] = _nb_project(o, wo, bo)
        return out

    @njit(parallel=True, cache=True)
    def _nb_paint_smallest(masks, areas):
        n, hgt, wid = masks.shape
        winner = np.full((hgt, wid), -1, dtype=np.int64)
        for y in prange(hgt):
            for x in range(wid):
                best = -1
                best_area = 0
                for i in range(n):
                    if masks[i, y, x] != 0 and (best < 0 or areas[i] < best_area):
                        best = i
                        best_area = areas[i]
                winner[y, x] = best
        return winner


numpy_impl = SimpleNamespace(
    name="numpy",
    region_softmax=_np_region_softmax,
    dense_masked_core=_np_dense_masked_core,
    gathered_attention=_np_gathered_attention,
    paint_smallest=_np_paint_smallest,
)

if HAS_NUMBA:
    numba_impl = SimpleNamespace(
        name="numba",
        region_softmax=_nb_region_softmax,
        dense_masked_core=_nb_dense_masked_core,
        gathered_attention=_nb_gathered_attention,
        paint_smallest=_nb_paint_smallest,
    )
else:  # pragma: no cover
    numba_impl = None

impl = numba_impl if BACKEND == "numba" else numpy_impl


def set_threads(n: int) -> None:
    """Pin numba's worker pool; no-op on the numpy backend."""
    if HAS_NUMBA:
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# Thin dispatchers so callers never touch the backend choice.


def region_softmax(logits: np.ndarray, labels: np.ndarray, lam: float) -> np.ndarray:
    shape = logits.shape
    flat = np.ascontiguousarray(logits.reshape((-1,) + shape[-2:]))
    lam = flat.dtype.type(lam)  # keep float32 inputs in float32 arithmetic
    return impl.region_softmax(flat, np.ascontiguousarray(labels, dtype=np.int64), lam).reshape(shape)


def dense_masked_core(q, k, v, labels, lam, scale):
    return impl.dense_masked_core(
        np.ascontiguousarray(q),
        np.ascontiguousarray(k),
        np.ascontiguousarray(v),
        np.ascontiguousarray(labels, dtype=np.int64),
        lam,
        scale,
    )


def gathered_attention(xs, bounds, wq, bq, wk, bk, wv, bv, wo, bo, heads, scale):
    args = [np.ascontiguousarray(a) for a in (xs,)]
    ws = [np.ascontiguousarray(a, dtype=xs.dtype) for a in (wq, bq, wk, bk, wv, bv, wo, bo)]
    return impl.gathered_attention(
        args[0], np.ascontiguousarray(bounds, dtype=np.int64), *ws, int(heads), xs.dtype.type(scale)
    )


def paint_smallest(masks: np.ndarray, areas: np.ndarray) -> np.ndarray:
    return impl.paint_smallest(
        np.ascontiguousarray(masks, dtype=np.uint8), np.ascontiguousarray(areas, dtype=np.int64)
    )
