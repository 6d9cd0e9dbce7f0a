"""Timing harness: dense region-masked attention vs per-region gathered attention.

Each case times three things on identical inputs: the full dense-masked
attention layer, the N x N masked core on its own (scores, masked softmax,
weighted sum), and the gathered per-region layer.  The quadratic-growth check
fits the core alone, since at small N the full layer is dominated by the
linear-in-N projections.
"""

from __future__ import annotations

import math
import time
import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .attention import attn_scale, gathered_region_attention, init_attn_params, mh_masked_attention
from .region import RegionPartition, attention_bias, region_sizes
from .tensor import Tensor

DIVERGENCE_TOL = 1e-5


@dataclass
class BenchCase:
    n: int
    num_regions: int
    region_sizes: list[int]
    dense_seconds: float
    dense_core_seconds: float
    gathered_seconds: float
    dense_peak_bytes: int
    gathered_peak_bytes: int
    divergence: float


@dataclass
class BenchReport:
    backend: str
    channels: int
    heads: int
    repeats: int
    cases: list[BenchCase] = field(default_factory=list)

    def dense_slope(self) -> float:
        """Least-squares slope of log(dense core time) against log(N)."""
        ns = sorted({c.n for c in self.cases})
        if len(ns) < 2:
            return float("nan")
        t = [np.median([c.dense_core_seconds for c in self.cases if c.n == n]) for n in ns]
        return float(np.polyfit(np.log(ns), np.log(t), 1)[0])

    def ok(self) -> bool:
        return all(c.divergence <= DIVERGENCE_TOL for c in self.cases)

    def lines(self) -> list[str]:
        out = [f"backend={self.backend} channels={self.channels} heads={self.heads} repeats={self.repeats}"]
        for c in self.cases:
            sizes = np.asarray(c.region_sizes)
            out.append(
                f"N={c.n} L={c.num_regions} size_min={sizes.min()} size_med={int(np.median(sizes))} "
                f"size_max={sizes.max()} dense_ms={c.dense_seconds * 1e3:.3f} dense_core_ms={c.dense_core_seconds * 1e3:.3f} "
                f"gathered_ms={c.gathered_seconds * 1e3:.3f} dense_peak_kb={c.dense_peak_bytes / 1024:.1f} "
                f"gathered_peak_kb={c.gathered_peak_bytes / 1024:.1f} divergence={c.divergence:.3e}"
            )
        out.append(f"dense_loglog_slope={self.dense_slope():.3f} all_within_tol={self.ok()}")
        return out


@contextmanager
def single_worker():
    """Pin BLAS and numba to one thread for timing."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        limiter = None
    else:
        limiter = threadpool_limits(1)
    _kernels.set_threads(1)
    try:
        yield
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def _grid_shape(n: int) -> tuple[int, int]:
    h = int(math.isqrt(n))
    while n % h:
        h -= 1
    return h, n // h


def random_partition(h: int, w: int, num_regions: int, rng: np.random.Generator) -> RegionPartition:
    """Voronoi cells of uniformly drawn sites, compacted."""
    sites = rng.uniform(0, 1, size=(num_regions, 2)) * (h, w)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    return RegionPartition.from_labels(np.argmin(d, axis=0))


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def _heads(t: np.ndarray, heads: int) -> np.ndarray:
    n, c = t.shape
    return np.ascontiguousarray(t.reshape(n, heads, c // heads).transpose(1, 0, 2))


def rel_inf(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(b).max()), 1e-30)
    return float(np.abs(a - b).max()) / scale


def bench_attn(
    sizes=(64, 256, 1024),
    region_counts=(4,),
    repeats: int = 5,
    channels: int = 32,
    heads: int = 4,
    lam: float = -1000.0,
    seed: int = 0,
    dtype=np.float32,
) -> BenchReport:
    repeats = max(int(repeats), 5)
    rng = np.random.default_rng(seed)
    report = BenchReport(_kernels.BACKEND, channels, heads, repeats)
    with T.default_dtype(dtype), T.no_grad(), single_worker():
        params = init_attn_params(channels, heads, rng)
        qkv = ((params.wq, params.bq), (params.wk, params.bk), (params.wv, params.bv))
        scale = attn_scale(channels, heads)
        for n in sizes:
            h, w = _grid_shape(n)
            for L in region_counts:
                part = random_partition(h, w, min(L, n), rng)
                bias = attention_bias(part, lam)
                x = Tensor(rng.normal(size=(n, channels)), dtype=dtype)

                def dense():
                    return mh_masked_attention(x, bias, params).data

                def gathered():
                    return gathered_region_attention(x, bias.latent_labels, params).data

                q, k, v = (_heads(x.data @ w.data + b.data, heads) for w, b in qkv)
                core_lam, core_scale = dtype(lam), dtype(scale)

                def core():
                    return _kernels.dense_masked_core(q, k, v, bias.latent_labels, core_lam, core_scale)

                d, g = dense(), gathered()  # warm-up (and JIT compile)
                core()
                report.cases.append(
                    BenchCase(
                        n=n,
                        num_regions=part.num_regions,
                        region_sizes=region_sizes(part).tolist(),
                        dense_seconds=_median_time(dense, repeats),
                        dense_core_seconds=_median_time(core, repeats),
                        gathered_seconds=_median_time(gathered, repeats),
                        dense_peak_bytes=_peak_bytes(dense),
                        gathered_peak_bytes=_peak_bytes(gathered),
                        divergence=rel_inf(d, g),
                    )
                )
    return report
