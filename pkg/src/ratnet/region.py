"""Region partitions: from overlapping segmenter masks to an attention bias.

A :class:`RegionPartition` assigns each pixel exactly one label in ``[0, L)``.
It is built from raw binary masks by :func:`postprocess_masks`, shrunk to
latent resolution by :func:`downscale_partition`, and turned into the additive
pre-softmax bias by :func:`attention_bias` / :func:`materialize_bias`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, FormatError
from .tensor import Tensor, get_default_dtype

DEFAULT_LAMBDA = -1000.0


@dataclass(frozen=True)
class MaskSet:
    """Raw binary masks, possibly overlapping and possibly not covering the image."""

    height: int
    width: int
    masks: np.ndarray  # (L0, H, W) uint8/bool

    @classmethod
    def from_list(cls, height: int, width: int, masks: Sequence[np.ndarray]) -> "MaskSet":
        for i, m in enumerate(masks):
            if np.shape(m) != (height, width):
                raise DimensionError(f"mask {i} has shape {np.shape(m)}, expected {(height, width)}")
        arr = np.zeros((len(masks), height, width), dtype=np.uint8)
        for i, m in enumerate(masks):
            arr[i] = np.asarray(m) != 0
        return cls(height, width, arr)


@dataclass(frozen=True)
class RegionPartition:
    labels: np.ndarray  # (H, W) integer region ids
    num_regions: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "RegionPartition":
        """Compact arbitrary integer labels to ``[0, L)`` keeping their relative order."""
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise DimensionError(f"labels must be 2-D, got shape {labels.shape}")
        uniq, inv = np.unique(labels, return_inverse=True)
        return cls(inv.reshape(labels.shape).astype(np.int64), len(uniq))

    def __eq__(self, other):
        if not isinstance(other, RegionPartition):
            return NotImplemented
        return self.num_regions == other.num_regions and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class AttentionBias:
    """Compact form of the attention mask: one region id per latent token."""

    latent_labels: np.ndarray  # (N,) int64
    lam: float = DEFAULT_LAMBDA

    def __len__(self):
        return len(self.latent_labels)


def postprocess_masks(ms: MaskSet) -> RegionPartition:
    """Resolve overlaps into an exclusive, exhaustive partition.

    A pixel covered by several masks goes to the one with the fewest pixels
    (ties: lowest mask index).  Uncovered pixels form a background region that
    takes the last label.  Masks that end up owning no pixel are dropped.
    """
    masks = np.asarray(ms.masks)
    if masks.ndim != 3 or masks.shape[1:] != (ms.height, ms.width):
        raise DimensionError(f"mask stack {masks.shape} does not match {(ms.height, ms.width)}")
    if masks.shape[0] == 0:
        return RegionPartition(np.zeros((ms.height, ms.width), dtype=np.int64), 1)
    areas = (masks != 0).reshape(masks.shape[0], -1).sum(axis=1)
    winner = _kernels.paint_smallest(masks, areas)
    owners = np.unique(winner[winner >= 0])
    lut = np.full(masks.shape[0], -1, dtype=np.int64)
    lut[owners] = np.arange(len(owners))
    labels = np.where(winner >= 0, lut[np.maximum(winner, 0)], len(owners))
    n = len(owners) + (1 if (winner < 0).any() else 0)
    return RegionPartition(labels.astype(np.int64), n)


def _nearest_index(n_dst: int, n_src: int) -> np.ndarray:
    # floor((i + 0.5) * n_src / n_dst) in exact integer arithmetic
    i = np.arange(n_dst, dtype=np.int64)
    return np.minimum(((2 * i + 1) * n_src) // (2 * n_dst), n_src - 1)


def downscale_partition(p: RegionPartition, h2: int, w2: int) -> RegionPartition:
    """Nearest-neighbour resample (half-pixel centres) and drop vanished regions."""
    if not (1 <= h2 <= p.height and 1 <= w2 <= p.width):
        raise ContractError(f"target {(h2, w2)} must lie within 1..{(p.height, p.width)}; upscaling is unsupported")
    rows = _nearest_index(h2, p.height)
    cols = _nearest_index(w2, p.width)
    return RegionPartition.from_labels(p.labels[np.ix_(rows, cols)])


def pad_partition(p: RegionPartition, h2: int, w2: int) -> RegionPartition:
    """Edge-extend labels on the bottom/right up to ``h2 x w2``."""
    if h2 < p.height or w2 < p.width:
        raise ContractError(f"pad target {(h2, w2)} smaller than {(p.height, p.width)}")
    labels = np.pad(p.labels, ((0, h2 - p.height), (0, w2 - p.width)), mode="edge")
    return RegionPartition(labels, p.num_regions)


def attention_bias(p: RegionPartition, lam: float = DEFAULT_LAMBDA) -> AttentionBias:
    return AttentionBias(np.ascontiguousarray(p.labels.reshape(-1), dtype=np.int64), float(lam))


def materialize_bias(b: AttentionBias, dtype=None) -> Tensor:
    """Dense N x N bias: 0 for same-region pairs, ``lam`` otherwise."""
    dtype = dtype or get_default_dtype()
    lab = np.asarray(b.latent_labels)
    same = lab[:, None] == lab[None, :]
    return Tensor(np.where(same, 0.0, b.lam).astype(dtype))


def grid_partition(h: int, w: int, win: int) -> RegionPartition:
    """Non-overlapping ``win x win`` windows numbered row-major."""
    if win < 1 or h % win or w % win:
        raise DimensionError(f"grid_partition: {(h, w)} not divisible by window {win}")
    i = np.arange(h)[:, None] // win
    j = np.arange(w)[None, :] // win
    return RegionPartition((i * (w // win) + j).astype(np.int64), (h // win) * (w // win))


def region_sizes(p: RegionPartition) -> np.ndarray:
    return np.bincount(p.labels.reshape(-1), minlength=p.num_regions)


def validate_partition(p: RegionPartition) -> list[str]:
    """Return a list of violations; empty means the partition is valid."""
    problems = []
    lab = np.asarray(p.labels)
    if lab.ndim != 2:
        return [f"labels must be 2-D, got shape {lab.shape}"]
    if p.num_regions < 1:
        problems.append(f"num_regions must be >= 1, got {p.num_regions}")
    bad = np.argwhere((lab < 0) | (lab >= p.num_regions))
    for y, x in bad[:5]:
        problems.append(f"pixel ({y}, {x}) has label {lab[y, x]} outside [0, {p.num_regions})")
    if len(bad) > 5:
        problems.append(f"... {len(bad) - 5} more out-of-range pixels")
    if not len(bad) and p.num_regions >= 1:
        missing = np.flatnonzero(np.bincount(lab.reshape(-1), minlength=p.num_regions) == 0)
        if len(missing):
            problems.append(f"labels {missing.tolist()} have no pixels (not compact)")
    return problems


# --------------------------------------------------------------------------
# RATM partition file and RATS raw-mask exchange file
# --------------------------------------------------------------------------

_RATM = b"RATM"
_RATS = b"RATS"


def write_partition(fh: BinaryIO, p: RegionPartition) -> None:
    if p.num_regions > 0xFFFF:
        raise FormatError(f"{p.num_regions} regions exceed the u16 label range")
    fh.write(_RATM)
    fh.write(struct.pack("<IQQI", 1, p.height, p.width, p.num_regions))
    fh.write(np.ascontiguousarray(p.labels, dtype="<u2").tobytes())


def read_partition(fh: BinaryIO, validate: bool = True) -> RegionPartition:
    head = fh.read(4 + struct.calcsize("<IQQI"))
    if len(head) < 4 or head[:4] != _RATM:
        raise FormatError("bad magic: not a RATM partition file")
    if len(head) != 4 + struct.calcsize("<IQQI"):
        raise FormatError("truncated RATM header")
    version, h, w, n = struct.unpack("<IQQI", head[4:])
    if version != 1:
        raise FormatError(f"unsupported RATM version {version}")
    raw = fh.read(2 * h * w)
    if len(raw) != 2 * h * w:
        raise FormatError(f"truncated RATM labels: expected {2 * h * w} bytes, got {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u2").astype(np.int64).reshape(h, w)
    part = RegionPartition(labels, int(n))
    if validate:
        problems = validate_partition(part)
        if problems:
            raise FormatError("invalid partition: " + "; ".join(problems))
    return part


def save_partition(path, p: RegionPartition) -> None:
    with open(path, "wb") as fh:
        write_partition(fh, p)


def load_partition(path, validate: bool = True) -> RegionPartition:
    try:
        with open(path, "rb") as fh:
            return read_partition(fh, validate=validate)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from None


def write_masks(fh: BinaryIO, ms: MaskSet) -> None:
    """RATS: magic, u32 count, then each mask as rows of MSB-first packed bits.

    The format carries no image size; readers must be told ``H x W``.
    """
    fh.write(_RATS)
    fh.write(struct.pack("<I", len(ms.masks)))
    for m in ms.masks:
        fh.write(np.packbits(np.asarray(m) != 0, axis=1, bitorder="big").tobytes())


def read_masks(fh: BinaryIO, height: int, width: int) -> MaskSet:
    head = fh.read(8)
    if len(head) < 4 or head[:4] != _RATS:
        raise FormatError("bad magic: not a RATS mask file")
    if len(head) != 8:
        raise FormatError("truncated RATS header")
    (count,) = struct.unpack("<I", head[4:])
    row_bytes = (width + 7) // 8
    masks = np.zeros((count, height, width), dtype=np.uint8)
    for i in range(count):
        raw = fh.read(row_bytes * height)
        if len(raw) != row_bytes * height:
            raise FormatError(f"truncated RATS data in mask {i}")
        packed = np.frombuffer(raw, dtype=np.uint8).reshape(height, row_bytes)
        masks[i] = np.unpackbits(packed, axis=1, count=width, bitorder="big")
    if fh.read(1):
        raise FormatError(f"trailing bytes after {count} masks; wrong height/width?")
    return MaskSet(height, width, masks)


def save_masks(path, ms: MaskSet) -> None:
    with open(path, "wb") as fh:
        write_masks(fh, ms)


def load_masks(path, height: int, width: int) -> MaskSet:
    try:
        with open(path, "rb") as fh:
            return read_masks(fh, height, width)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from None
