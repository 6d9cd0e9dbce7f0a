"""Adam + cosine schedule, the training loop and PSNR/SSIM evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import apply_kv, read_kv
from .errors import ConfigError, NumericError
from .losses import focal_region_loss, l1, psnr, ssim
from .model import PRESETS, RATConfig, RATModel, build_model, forward, save_model
from .synth import SamplePair, load_dataset
from .tensor import Tensor

log = logging.getLogger(__name__)


def cosine_lr(step: int, lr0: float = 2e-4, lr_min: float = 1e-6, total: int = 200_000) -> float:
    """``lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2``."""
    if total <= 0:
        return lr0
    step = min(max(step, 0), total)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr0: float = 2e-4
    lr_min: float = 1e-6
    total_steps: int = 2000
    seed: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: TrainState,
    lr: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> float:
    """Bias-corrected Adam update in place.  Returns the learning rate used.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    if lr is None:
        lr = cosine_lr(state.step, state.lr0, state.lr_min, state.total_steps)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name} at step {state.step}")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    state.step = t
    return lr


@dataclass(frozen=True)
class TrainConfig:
    data: str = ""
    test_data: str = ""
    out: str = "runs/default"
    preset: str = "toy"
    steps: int = 2000
    lr0: float = 2e-4
    lr_min: float = 1e-6
    loss: str = "focal"
    gamma: float = 1e-3
    delta: float = 1.0
    seed: int = 0
    batch_size: int = 1
    weight_decay: float = 0.0
    log_every: int = 50
    eval_every: int = 100
    val_fraction: float = 0.1
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        if self.loss not in ("l1", "focal"):
            raise ConfigError(f"loss must be 'l1' or 'focal', got {self.loss!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("only batch_size = 1 is supported")
        if self.weight_decay != 0.0:
            raise ConfigError("weight_decay is not supported (must be 0)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self


def load_config(path=None, overrides: dict[str, str] | None = None) -> tuple[RATConfig, TrainConfig]:
    """Split one ``key = value`` file (plus overrides) into model and training configs."""
    kv = dict(read_kv(path)) if path else {}
    kv.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    train_keys = set(TrainConfig.__dataclass_fields__)
    model_keys = set(RATConfig.__dataclass_fields__)
    unknown = set(kv) - train_keys - model_keys
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    tcfg = apply_kv(TrainConfig(), {k: v for k, v in kv.items() if k in train_keys}).validate()
    mcfg = apply_kv(PRESETS[tcfg.preset](), {k: v for k, v in kv.items() if k in model_keys}).validate()
    return mcfg, tcfg


def split_validation(n: int, fraction: float) -> tuple[list[int], list[int]]:
    """Hold out the last ``floor(fraction * n)`` samples (at least one when n >= 2 and fraction > 0)."""
    k = int(math.floor(fraction * n))
    if fraction > 0 and n >= 2:
        k = max(k, 1)
    return list(range(n - k)), list(range(n - k, n))


@dataclass
class EvalResult:
    psnr: list[float]
    ssim: list[float]

    @property
    def n(self) -> int:
        return len(self.psnr)

    def stats(self) -> dict[str, float]:
        # population std
        return {
            "psnr_mean": float(np.mean(self.psnr)),
            "psnr_std": float(np.std(self.psnr)),
            "ssim_mean": float(np.mean(self.ssim)),
            "ssim_std": float(np.std(self.ssim)),
        }

    def block(self) -> str:
        s = self.stats()
        return (
            f"psnr_mean={s['psnr_mean']:.4f} psnr_std={s['psnr_std']:.4f} "
            f"ssim_mean={s['ssim_mean']:.4f} ssim_std={s['ssim_std']:.4f} n={self.n}"
        )

    def text(self) -> str:
        s = self.stats()
        return (
            f"PSNR {s['psnr_mean']:.4f} ± {s['psnr_std']:.4f}\n"
            f"SSIM {s['ssim_mean']:.4f} ± {s['ssim_std']:.4f}\n"
        )


def restore(model: RATModel | None, sample: SamplePair) -> np.ndarray:
    """Model output clipped to [0, 1]; ``model=None`` returns the degraded input."""
    if model is None:
        return sample.lq.data
    with T.no_grad():
        lq = Tensor(sample.lq.data, dtype=model.dtype)
        return np.clip(forward(model, lq, sample.part).data, 0.0, 1.0)


def evaluate(model: RATModel | None, samples: list[SamplePair]) -> EvalResult:
    res = EvalResult([], [])
    for s in samples:
        pred = restore(model, s)
        res.psnr.append(psnr(pred, s.hq.data))
        res.ssim.append(ssim(pred, s.hq.data))
    return res


@dataclass
class TrainResult:
    model: RATModel
    losses: list[float]
    log_lines: list[str]
    best_psnr: float
    best_step: int
    final_path: Path | None = None
    best_path: Path | None = None


def train_model(
    mcfg: RATConfig,
    tcfg: TrainConfig,
    train_samples: list[SamplePair],
    val_samples: list[SamplePair] | None = None,
    out_dir=None,
) -> TrainResult:
    """Run ``tcfg.steps`` Adam steps, one sample per step, in seeded epoch order."""
    tcfg.validate()
    if not train_samples:
        raise ConfigError("no training samples")
    dtype = np.float64 if tcfg.dtype == "float64" else np.float32
    model = build_model(mcfg, seed=tcfg.seed, dtype=dtype)
    params = model.named_parameters()
    by_id = {id(t): name for name, t in params.items()}
    state = TrainState(lr0=tcfg.lr0, lr_min=tcfg.lr_min, total_steps=tcfg.steps, seed=tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    data = [(Tensor(s.lq.data, dtype=dtype), Tensor(s.hq.data, dtype=dtype), s.part) for s in train_samples]
    order: list[int] = []
    losses, lines = [], []
    best_psnr, best_step, best_blob = -math.inf, 0, None
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    for step in range(tcfg.steps):
        if not order:
            order = list(rng.permutation(len(data)))
        lq, hq, part = data[order.pop()]
        pred = forward(model, lq, part)
        if tcfg.loss == "focal":
            loss, _ = focal_region_loss(pred, hq, part, tcfg.gamma, tcfg.delta)
        else:
            loss = l1(pred, hq)
        grads = T.backward(loss)
        named = {by_id[id(t)]: g for t, g in grads.items() if id(t) in by_id}
        lr = adam_step(params, named, state)
        losses.append(float(loss.data))
        if (step + 1) % tcfg.log_every == 0 or step == 0 or step + 1 == tcfg.steps:
            line = f"step={step + 1} loss={losses[-1]:.6g} lr={lr:.6g}"
            lines.append(line)
            log.info(line)
        if val_samples and ((step + 1) % tcfg.eval_every == 0 or step + 1 == tcfg.steps):
            score = float(np.mean(evaluate(model, val_samples).psnr))
            if score > best_psnr:
                best_psnr, best_step = score, step + 1
                best_blob = {k: t.data.copy() for k, t in params.items()}

    final_path = best_path = None
    if out:
        final_path = out / "final.ratk"
        save_model(final_path, model)
        (out / "metrics.log").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        best_path = out / "best.ratk"
        if best_blob is not None:
            snapshot = build_model(mcfg, seed=tcfg.seed, dtype=dtype)
            for k, t in snapshot.named_parameters().items():
                t.data = best_blob[k]
            save_model(best_path, snapshot)
        else:
            save_model(best_path, model)
    return TrainResult(model, losses, lines, best_psnr, best_step, final_path, best_path)


def train(config_path=None, overrides: dict[str, str] | None = None) -> TrainResult:
    """Load config + dataset, split off validation, train, write checkpoints and the log."""
    mcfg, tcfg = load_config(config_path, overrides)
    if not tcfg.data:
        raise ConfigError("config needs 'data' (a generated dataset directory)")
    samples = load_dataset(tcfg.data)
    tr_idx, va_idx = split_validation(len(samples), tcfg.val_fraction)
    return train_model(
        mcfg,
        tcfg,
        [samples[i] for i in tr_idx],
        [samples[i] for i in va_idx],
        out_dir=tcfg.out,
    )

