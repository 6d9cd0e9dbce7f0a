"""Synthetic region-structured restoration pairs with known partitions."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import dump_kv
from .errors import ConfigError, FormatError
from .region import RegionPartition, load_partition, save_partition
from .tensor import Tensor, load_tensor, save_tensor

LAYOUTS = ("voronoi", "rectangles")
TEXTURES = ("sinusoid", "constant", "gradient")
DEGRADATIONS = ("noise", "blur", "down_up", "none")


@dataclass(frozen=True)
class SynthSpec:
    height: int = 32
    width: int = 32
    layout: str = "voronoi"
    n_regions: int = 6
    textures: str = "sinusoid"  # comma-separated subset of TEXTURES
    degradation: str = "noise"
    sigma: float = 0.1
    blur_k: int = 3
    factor: int = 2
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"image must be at least 16x16, got {self.height}x{self.width}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {LAYOUTS}")
        if self.n_regions < 1:
            raise ConfigError("n_regions must be >= 1")
        bad = [t for t in self.texture_list() if t not in TEXTURES]
        if bad or not self.texture_list():
            raise ConfigError(f"textures must be drawn from {TEXTURES}, got {self.textures!r}")
        if self.degradation not in DEGRADATIONS:
            raise ConfigError(f"degradation must be one of {DEGRADATIONS}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.factor not in (2, 4):
            raise ConfigError("factor must be 2 or 4")
        if self.blur_k < 1 or self.blur_k % 2 == 0:
            raise ConfigError("blur_k must be a positive odd integer")
        return self

    def texture_list(self) -> list[str]:
        return [t.strip() for t in self.textures.split(",") if t.strip()]


@dataclass
class SamplePair:
    hq: Tensor
    lq: Tensor
    part: RegionPartition


def _voronoi(rng, h, w, n):
    sites = rng.uniform(0, 1, size=(n, 2)) * (h, w)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    return np.argmin(d, axis=0)


def _rectangles(rng, h, w, n):
    lab = np.zeros((h, w), dtype=np.int64)
    for i in range(1, n):
        rh, rw = rng.integers(h // 4, h // 2 + 1), rng.integers(w // 4, w // 2 + 1)
        y, x = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        lab[y : y + rh, x : x + rw] = i
    return lab


def _texture(rng, kind, h, w, freq):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "constant":
        return np.full((h, w), rng.uniform(0.15, 0.85))
    if kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(theta) * yy / h + np.sin(theta) * xx / w + 1.0) / 2.0
        lo = rng.uniform(0.1, 0.4)
        return lo + (rng.uniform(0.6, 0.9) - lo) * ramp
    base = rng.uniform(0.35, 0.65)
    amp = rng.uniform(0.5, 0.9) * min(base, 1.0 - base)
    theta, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
    return base + amp * np.sin(2 * np.pi * freq * (np.cos(theta) * yy + np.sin(theta) * xx) + phase)


def degrade(hq, kind: str, spec: SynthSpec | None = None, seed: int = 0, **params) -> Tensor:
    """Apply one degradation to an image in [0, 1]; the result is clipped to [0, 1].

    Parameters come from ``spec`` (sigma / blur_k / factor) unless overridden
    by keyword.
    """
    spec = spec or SynthSpec()
    img = hq.data if isinstance(hq, Tensor) else np.asarray(hq, dtype=np.float64)
    dtype = img.dtype
    x = img.astype(np.float64)
    if kind == "none":
        out = x
    elif kind == "noise":
        sigma = params.get("sigma", spec.sigma)
        out = x + np.random.default_rng(seed).normal(0.0, 1.0, size=x.shape) * sigma if sigma > 0 else x
    elif kind == "blur":
        out = _box_blur(x, int(params.get("k", spec.blur_k)))
    elif kind == "down_up":
        out = _down_up(x, int(params.get("factor", spec.factor)))
    else:
        raise ConfigError(f"unknown degradation {kind!r}; expected one of {DEGRADATIONS}")
    return Tensor(np.clip(out, 0.0, 1.0), dtype=dtype)


def _box_blur(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x, pad, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(-2, -1))
    return win.mean(axis=(-2, -1))


def _linear_axis(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    t = pos - lo
    a, b = np.take(x, lo, axis=axis), np.take(x, hi, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n_out
    return a + t.reshape(shape) * (b - a)


def _down_up(x: np.ndarray, f: int) -> np.ndarray:
    h, w = x.shape[-2:]
    small = x[..., f // 2 :: f, f // 2 :: f]
    return _linear_axis(_linear_axis(small, h, -2), w, -1)


def gen_sample(spec: SynthSpec, dtype=np.float32) -> SamplePair:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    raw = _voronoi(rng, h, w, spec.n_regions) if spec.layout == "voronoi" else _rectangles(rng, h, w, spec.n_regions)
    part = RegionPartition.from_labels(raw)
    kinds = spec.texture_list()
    # distinct frequencies per region so neighbouring regions do not share texture statistics
    freqs = rng.permutation(np.linspace(0.04, 0.4, max(part.num_regions, 8)))[: part.num_regions]
    img = np.zeros((h, w))
    for r in range(part.num_regions):
        tex = _texture(rng, kinds[rng.integers(len(kinds))], h, w, freqs[r])
        sel = part.labels == r
        img[sel] = tex[sel]
    hq = Tensor(np.clip(img, 0.0, 1.0)[None, None], dtype=dtype)
    noise_seed = int(rng.integers(2**31))
    lq = degrade(hq, spec.degradation, spec, seed=noise_seed)
    return SamplePair(hq, lq, part)


def _sample_seed(seed: int, idx: int) -> int:
    return int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])


def gen_dataset(spec: SynthSpec, count: int, directory, pgm: bool = False) -> list[str]:
    """Write ``count`` pairs plus ``manifest.txt``; returns the manifest lines."""
    spec.validate()
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        pair = gen_sample(replace(spec, seed=_sample_seed(spec.seed, i)))
        names = (f"hq_{i:04d}.ratt", f"lq_{i:04d}.ratt", f"mask_{i:04d}.ratm")
        save_tensor(out / names[0], pair.hq)
        save_tensor(out / names[1], pair.lq)
        save_partition(out / names[2], pair.part)
        if pgm:
            write_pgm(out / f"hq_{i:04d}.pgm", pair.hq.data[0, 0])
            write_pgm(out / f"lq_{i:04d}.pgm", pair.lq.data[0, 0])
        lines.append("\t".join((str(i),) + names))
    (out / "manifest.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    (out / "spec.txt").write_text(dump_kv(spec) + f"count = {count}\n", encoding="utf-8")
    return lines


def read_manifest(directory) -> list[tuple[int, Path, Path, Path]]:
    d = Path(directory)
    path = d / "manifest.txt"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
        try:
            idx = int(parts[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad index {parts[0]!r}") from None
        rows.append((idx, d / parts[1], d / parts[2], d / parts[3]))
    return rows


def _load_row(directory, idx, hq, lq, mask) -> SamplePair:
    pair = SamplePair(load_tensor(hq), load_tensor(lq), load_partition(mask))
    if pair.hq.shape != pair.lq.shape or pair.hq.shape[-2:] != (pair.part.height, pair.part.width):
        raise FormatError(f"{directory}: sample {idx} has inconsistent shapes")
    return pair


def load_sample(directory, idx: int) -> SamplePair:
    for row in read_manifest(directory):
        if row[0] == idx:
            return _load_row(directory, *row)
    raise FormatError(f"{directory}: no sample with index {idx}")


def load_dataset(directory) -> list[SamplePair]:
    return [_load_row(directory, *row) for row in read_manifest(directory)]


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 greyscale, maxval 255."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError(f"PGM export needs a 2-D image, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
