"""Command-line entry point: ``ratnet <command> ...``.

Failures print one ``ErrorClass: message`` line to stderr and exit with status 1
(2 for argument errors, as argparse does).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import apply_kv, read_kv
from .errors import ConfigError, FormatError, RatError
from .gradcheck import run_grad_suite
from .model import load_model
from .region import load_masks, load_partition, postprocess_masks, region_sizes, save_partition, validate_partition
from .synth import SynthSpec, gen_dataset, load_dataset
from .train import evaluate, train


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ratnet", description="Region-aware attention restoration toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(g)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--degradation", choices=("noise", "blur", "down_up", "none"))
    g.add_argument("--sigma", type=float)
    g.add_argument("--pgm", action="store_true", help="also write PGM previews")

    t = sub.add_parser("train", help="train a model")
    _common(t)
    t.add_argument("--data", type=Path)
    t.add_argument("--steps", type=int)
    t.add_argument("--loss", choices=("l1", "focal"))
    t.add_argument("--attn", choices=("rmsa", "wmsa", "msa"))
    t.add_argument("--preset", choices=("toy", "paper"))

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint (or of the inputs) on a dataset")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, help="omit to score the degraded inputs")
    e.add_argument("--per-sample", action="store_true")

    b = sub.add_parser("bench-attn", help="dense-masked vs gathered attention timing")
    b.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 1024])
    b.add_argument("--regions", type=int, nargs="+", default=[4])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("grad-check", help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--params", type=int, default=100)

    m = sub.add_parser("mask-tool", help="inspect and convert region files")
    msub = m.add_subparsers(dest="action", required=True)
    v = msub.add_parser("validate")
    v.add_argument("path", type=Path)
    i = msub.add_parser("info")
    i.add_argument("path", type=Path)
    f = msub.add_parser("from-binary-masks")
    f.add_argument("path", type=Path, help="RATS mask-set file")
    f.add_argument("--height", type=int, required=True)
    f.add_argument("--width", type=int, required=True)
    f.add_argument("--out", type=Path, required=True)
    return ap


def _gen_data(a) -> int:
    spec = apply_kv(SynthSpec(), read_kv(a.config)) if a.config else SynthSpec()
    over = {k: getattr(a, k) for k in ("height", "width", "degradation", "sigma", "seed")}
    spec = replace(spec, **{k: v for k, v in over.items() if v is not None}).validate()
    out = a.out or Path("data")
    gen_dataset(spec, a.count, out, pgm=a.pgm)
    print(f"wrote {a.count} samples to {out}")
    return 0


def _train(a) -> int:
    over = {
        "seed": a.seed,
        "out": a.out,
        "steps": a.steps,
        "loss": a.loss,
        "attn": a.attn,
        "preset": a.preset,
        "data": a.data,
    }
    res = train(a.config, {k: str(v) for k, v in over.items() if v is not None})
    for line in res.log_lines:
        print(line)
    if res.best_step:
        print(f"best_psnr={res.best_psnr:.4f} best_step={res.best_step}")
    print(f"final={res.final_path} best={res.best_path}")
    return 0


def _eval(a) -> int:
    samples = load_dataset(a.data)
    model = load_model(a.checkpoint) if a.checkpoint else None
    res = evaluate(model, samples)
    if a.per_sample:
        for k, (p, s) in enumerate(zip(res.psnr, res.ssim)):
            print(f"sample={k} psnr={p:.4f} ssim={s:.4f}")
    print(res.block())
    return 0


def _bench(a) -> int:
    from .bench import bench_attn

    rep = bench_attn(tuple(a.sizes), tuple(a.regions), a.repeats, a.channels, a.heads, seed=a.seed)
    for line in rep.lines():
        print(line)
    if not rep.ok():
        raise ConfigError("divergence above tolerance in at least one case")
    return 0


def _grad_check(a) -> int:
    results = run_grad_suite(seeds=a.seeds, e2e_params=a.params)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _mask_tool(a) -> int:
    if a.action == "validate":
        problems = validate_partition(load_partition(a.path, validate=False))
        if problems:
            raise FormatError(f"{a.path}: {len(problems)} violation(s); first: {problems[0]}")
        print(f"{a.path}: ok")
        return 0
    if a.action == "info":
        p = load_partition(a.path)
        sizes = region_sizes(p)
        print(f"height={p.height} width={p.width} regions={p.num_regions}")
        print("sizes=" + ",".join(str(int(s)) for s in sizes))
        return 0
    ms = load_masks(a.path, a.height, a.width)
    p = postprocess_masks(ms)
    save_partition(a.out, p)
    print(f"masks={len(ms.masks)} regions={p.num_regions} -> {a.out}")
    return 0


_COMMANDS = {
    "gen-data": _gen_data,
    "train": _train,
    "eval": _eval,
    "bench-attn": _bench,
    "grad-check": _grad_check,
    "mask-tool": _mask_tool,
}


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        return _COMMANDS[a.command](a)
    except (RatError, OSError) as e:
        print(f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
