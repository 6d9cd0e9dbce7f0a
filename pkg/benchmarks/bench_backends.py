"""Time each hot kernel under the numba and the pure-numpy backend.

    python3 benchmarks/bench_backends.py [--sizes 64 256 1024] [--repeats 7]

Both implementations are called directly (not through the env-selected
dispatcher), so one run compares them side by side.  Every row also reports the
max absolute difference between the two outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ratnet import _kernels as K
from ratnet.attention import canonical_region_order, init_attn_params
from ratnet.bench import random_partition, single_worker, _grid_shape


def median_ms(fn, repeats):
    fn()  # warm-up / JIT compile
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def kernel_inputs(n, channels, heads, regions, rng):
    h, w = _grid_shape(n)
    labels = random_partition(h, w, min(regions, n), rng).labels.reshape(-1).astype(np.int64)
    x = rng.normal(size=(n, channels)).astype(np.float32)
    p = init_attn_params(channels, heads, rng, dtype=np.float32)
    weights = [t.data for t in (p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo)]
    dh = channels // heads
    q, k, v = (rng.normal(size=(heads, n, dh)).astype(np.float32) for _ in range(3))
    logits = rng.normal(size=(heads, n, n)).astype(np.float32)
    order, bounds = canonical_region_order(x, labels)
    masks = (rng.uniform(size=(8, h, w)) < 0.3).astype(np.uint8)
    return dict(
        labels=labels,
        q=q,
        k=k,
        v=v,
        logits=logits,
        xs=np.ascontiguousarray(x[order]),
        bounds=bounds.astype(np.int64),
        weights=weights,
        heads=heads,
        scale=np.float32(1.0 / np.sqrt(dh)),
        masks=masks,
        areas=masks.reshape(8, -1).sum(axis=1).astype(np.int64),
    )


def calls(impl, a):
    return {
        "region_softmax": lambda: impl.region_softmax(a["logits"], a["labels"], -1000.0),
        "dense_masked_core": lambda: impl.dense_masked_core(a["q"], a["k"], a["v"], a["labels"], -1000.0, a["scale"]),
        "gathered_attention": lambda: impl.gathered_attention(
            a["xs"], a["bounds"], *a["weights"], a["heads"], a["scale"]
        ),
        "paint_smallest": lambda: impl.paint_smallest(a["masks"], a["areas"]),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 1024])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--regions", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if K.numba_impl is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20} {'N':>5} {'numpy_ms':>10} {'numba_ms':>10} {'speedup':>8} {'max_abs_diff':>12}")
    with single_worker():
        for n in args.sizes:
            a = kernel_inputs(n, args.channels, args.heads, args.regions, rng)
            ref, fast = calls(K.numpy_impl, a), calls(K.numba_impl, a)
            for name in ref:
                t_np = median_ms(ref[name], args.repeats)
                t_nb = median_ms(fast[name], args.repeats)
                diff = float(np.abs(np.asarray(ref[name](), np.float64) - fast[name]()).max())
                print(f"{name:<20} {n:>5} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>8.2f} {diff:>12.3e}")


if __name__ == "__main__":
    main()
