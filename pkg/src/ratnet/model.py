"""The U-shaped region attention restoration network.

Layout (two levels each way)::

    conv3x3 -> [conv blocks -> unshuffle -> 1x1]  x2  -> RAT blocks
            -> [1x1 -> shuffle -> +skip -> conv blocks]  x2  -> conv3x3 -> + input

Each RAT block is one region-masked layer followed by one window layer, both
at 1/4 resolution with 4C channels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (
    SCALE_MODES,
    TransformerLayerParams,
    init_layer_params,
    named_tensors,
    rmsa_layer,
    wmsa_layer,
)
from .config import apply_kv, dump_kv, parse_kv
from .errors import ConfigError, DimensionError, FormatError
from .region import RegionPartition, attention_bias, downscale_partition, pad_partition
from .tensor import Tensor

ATTN_VARIANTS = ("rmsa", "wmsa", "msa")
BLOCK_TYPES = ("simple",)


@dataclass(frozen=True)
class RATConfig:
    in_channels: int = 1
    base_channels: int = 16
    n1: int = 1
    n2: int = 1
    n3: int = 2
    n4: int = 1
    n5: int = 1
    heads: int = 4
    win: int = 4
    lam: float = -1000.0
    mlp_ratio: int = 4
    scale_mode: str = "head-dim"
    attn: str = "rmsa"
    block_type: str = "simple"

    def validate(self) -> "RATConfig":
        c = self.base_channels
        if self.in_channels < 1 or c < 1:
            raise ConfigError("in_channels and base_channels must be >= 1")
        if min(self.n1, self.n2, self.n3, self.n4, self.n5) < 0:
            raise ConfigError("block counts must be >= 0")
        if self.heads < 1 or (4 * c) % self.heads:
            raise ConfigError(f"latent width {4 * c} not divisible by heads {self.heads}")
        if self.win < 1:
            raise ConfigError(f"win must be >= 1, got {self.win}")
        if not self.lam < 0:
            raise ConfigError(f"lam must be negative, got {self.lam}")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError(f"scale_mode must be one of {SCALE_MODES}")
        if self.attn not in ATTN_VARIANTS:
            raise ConfigError(f"attn must be one of {ATTN_VARIANTS}")
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"block_type must be one of {BLOCK_TYPES}")
        return self

    @classmethod
    def toy(cls, **kw) -> "RATConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "RATConfig":
        base = dict(base_channels=64, n1=2, n2=2, n3=12, n4=2, n5=2, heads=8, win=4)
        base.update(kw)
        return cls(**base)


PRESETS = {"toy": RATConfig.toy, "paper": RATConfig.paper}


@dataclass
class ConvBlockParams:
    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class RATBlockParams:
    region: TransformerLayerParams
    window: TransformerLayerParams


@dataclass
class RATModel:
    cfg: RATConfig
    in_w: Tensor
    in_b: Tensor
    enc1: list = field(default_factory=list)
    down1_w: Tensor = None
    down1_b: Tensor = None
    enc2: list = field(default_factory=list)
    down2_w: Tensor = None
    down2_b: Tensor = None
    latent: list = field(default_factory=list)
    up2_w: Tensor = None
    up2_b: Tensor = None
    dec2: list = field(default_factory=list)
    up1_w: Tensor = None
    up1_b: Tensor = None
    dec1: list = field(default_factory=list)
    out_w: Tensor = None
    out_b: Tensor = None

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, Tensor):
                out[f.name] = val
            elif isinstance(val, list):
                for i, blk in enumerate(val):
                    if isinstance(blk, RATBlockParams):
                        out.update(named_tensors(blk.region, f"{f.name}.{i}.region."))
                        out.update(named_tensors(blk.window, f"{f.name}.{i}.window."))
                    else:
                        out.update(named_tensors(blk, f"{f.name}.{i}."))
        return out

    @property
    def dtype(self):
        return self.in_w.dtype

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())


def _uniform(rng, shape, fan_in, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _conv(rng, cout, cin, k, dtype):
    return _uniform(rng, (cout, cin, k, k), cin * k * k, dtype), _zeros((cout,), dtype)


def _conv_block(rng, c, dtype) -> ConvBlockParams:
    w1, b1 = _conv(rng, c, c, 3, dtype)
    w2, b2 = _conv(rng, c, c, 3, dtype)
    return ConvBlockParams(Tensor(np.ones(c), requires_grad=True, dtype=dtype), _zeros((c,), dtype), w1, b1, w2, b2)


def build_model(cfg: RATConfig, seed: int = 0, dtype=None) -> RATModel:
    """Deterministic fan-in uniform init; the output projection starts at zero."""
    cfg.validate()
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng(seed)
    c, cin = cfg.base_channels, cfg.in_channels
    d = 4 * c
    m = RATModel(cfg, *_conv(rng, c, cin, 3, dtype))
    m.enc1 = [_conv_block(rng, c, dtype) for _ in range(cfg.n1)]
    m.down1_w, m.down1_b = _conv(rng, 2 * c, 4 * c, 1, dtype)
    m.enc2 = [_conv_block(rng, 2 * c, dtype) for _ in range(cfg.n2)]
    m.down2_w, m.down2_b = _conv(rng, d, 8 * c, 1, dtype)
    m.latent = [
        RATBlockParams(
            init_layer_params(d, cfg.heads, cfg.mlp_ratio, rng, dtype),
            init_layer_params(d, cfg.heads, cfg.mlp_ratio, rng, dtype),
        )
        for _ in range(cfg.n3)
    ]
    m.up2_w, m.up2_b = _conv(rng, 8 * c, d, 1, dtype)
    m.dec2 = [_conv_block(rng, 2 * c, dtype) for _ in range(cfg.n4)]
    m.up1_w, m.up1_b = _conv(rng, 4 * c, 2 * c, 1, dtype)
    m.dec1 = [_conv_block(rng, c, dtype) for _ in range(cfg.n5)]
    m.out_w, m.out_b = _zeros((cin, c, 3, 3), dtype), _zeros((cin,), dtype)
    return m


def conv_block(x: Tensor, p: ConvBlockParams) -> Tensor:
    """``x + conv(gelu(conv(LN_channels(x))))``; stands in for NAFBlock."""
    h = T.permute(x, (0, 2, 3, 1))
    h = T.permute(T.layer_norm(h, p.ln_g, p.ln_b), (0, 3, 1, 2))
    h = T.conv3x3(h, p.w1, p.b1)
    h = T.conv3x3(T.gelu(h), p.w2, p.b2)
    return T.add(x, h)


def padded_size(h: int, w: int, multiple: int) -> tuple[int, int]:
    return -(-h // multiple) * multiple, -(-w // multiple) * multiple


def _latent_stage(m: RATModel, x: Tensor, part: RegionPartition | None) -> Tensor:
    cfg = m.cfg
    _, d, h, w = x.shape
    grid = T.reshape(T.permute(x, (0, 2, 3, 1)), (h, w, d))
    bias = None
    if cfg.attn == "rmsa":
        if part is None:
            raise DimensionError("attn='rmsa' needs a region partition")
        bias = attention_bias(downscale_partition(part, h, w), cfg.lam)
    for blk in m.latent:
        if cfg.attn == "wmsa":
            grid = wmsa_layer(grid, cfg.win, blk.region, cfg.scale_mode, lam=cfg.lam)
        else:
            flat = rmsa_layer(T.reshape(grid, (h * w, d)), bias, blk.region, cfg.scale_mode)
            grid = T.reshape(flat, (h, w, d))
        grid = wmsa_layer(grid, cfg.win, blk.window, cfg.scale_mode, lam=cfg.lam)
    return T.permute(T.reshape(grid, (1, h, w, d)), (0, 3, 1, 2))


def forward(m: RATModel, lq: Tensor, part: RegionPartition | None = None) -> Tensor:
    """Restore ``lq`` (1, Cin, H, W) guided by a full-resolution partition."""
    cfg = m.cfg
    if lq.ndim != 4 or lq.shape[0] != 1 or lq.shape[1] != cfg.in_channels:
        raise DimensionError(f"forward expects (1, {cfg.in_channels}, H, W), got {lq.shape}")
    _, _, h, w = lq.shape
    if part is not None and (part.height, part.width) != (h, w):
        raise DimensionError(f"partition {(part.height, part.width)} does not match image {(h, w)}")
    hp, wp = padded_size(h, w, 4 * cfg.win)
    x = lq
    if (hp, wp) != (h, w):
        x = Tensor(np.pad(lq.data, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)), mode="reflect"))
        if part is not None:
            part = pad_partition(part, hp, wp)

    x = T.conv3x3(x, m.in_w, m.in_b)
    for p in m.enc1:
        x = conv_block(x, p)
    skip1 = x
    x = T.conv2d(T.pixel_unshuffle(x, 2), m.down1_w, m.down1_b)
    for p in m.enc2:
        x = conv_block(x, p)
    skip2 = x
    x = T.conv2d(T.pixel_unshuffle(x, 2), m.down2_w, m.down2_b)

    x = _latent_stage(m, x, part)

    x = T.add(T.pixel_shuffle(T.conv2d(x, m.up2_w, m.up2_b), 2), skip2)
    for p in m.dec2:
        x = conv_block(x, p)
    x = T.add(T.pixel_shuffle(T.conv2d(x, m.up1_w, m.up1_b), 2), skip1)
    for p in m.dec1:
        x = conv_block(x, p)
    res = T.conv3x3(x, m.out_w, m.out_b)
    if (hp, wp) != (h, w):
        res = T.crop(res, h, w)
    return T.add(lq, res)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"RATK"


def save_model(path, m: RATModel) -> None:
    """Header, then a text manifest (config echo + tensor names), then RATT records."""
    params = m.named_parameters()
    manifest = dump_kv(m.cfg) + "".join(
        f"tensor {name} {'x'.join(map(str, t.shape))}\n" for name, t in params.items()
    )
    blob = manifest.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", 1, len(blob)))
        fh.write(blob)
        for t in params.values():
            T.write_tensor(fh, t)


def load_model(path, cfg: RATConfig | None = None) -> RATModel:
    """Read a checkpoint; with ``cfg`` given, shapes are checked against that config."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from None
    with fh:
        head = fh.read(12)
        if len(head) < 4 or head[:4] != _CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        if len(head) != 12:
            raise FormatError(f"{path}: truncated checkpoint header")
        version, size = struct.unpack("<II", head[4:])
        if version != 1:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        blob = fh.read(size)
        if len(blob) != size:
            raise FormatError(f"{path}: truncated manifest")
        lines = blob.decode("utf-8").splitlines()
        names = []
        kv_lines = []
        for line in lines:
            if line.startswith("tensor "):
                _, name, dims = line.split(" ")
                names.append((name, tuple(int(s) for s in dims.split("x"))))
            else:
                kv_lines.append(line)
        saved_cfg = apply_kv(RATConfig(), parse_kv("\n".join(kv_lines), str(path)))
        dtype = None
        loaded = {}
        for name, dims in names:
            try:
                t = T.read_tensor(fh)
            except FormatError as e:
                raise FormatError(f"{path}: tensor {name}: {e}") from None
            if t.shape != dims:
                raise FormatError(f"{path}: tensor {name}: record shape {t.shape} != manifest {dims}")
            loaded[name] = t
            dtype = t.dtype
    target_cfg = cfg if cfg is not None else saved_cfg
    m = build_model(target_cfg, seed=0, dtype=dtype)
    params = m.named_parameters()
    for name, t in params.items():
        if name not in loaded:
            raise FormatError(f"{path}: tensor {name} missing from checkpoint")
        if loaded[name].shape != t.shape:
            raise FormatError(f"{path}: tensor {name}: shape {loaded[name].shape} does not match expected {t.shape}")
        t.data = loaded[name].data.copy()
    extra = set(loaded) - set(params)
    if extra:
        raise FormatError(f"{path}: unexpected tensor {sorted(extra)[0]}")
    return m
