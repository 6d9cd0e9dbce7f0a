"""A small dense tensor engine with reverse-mode differentiation.

Only the op set the restoration network needs is provided.  Every op returns a
new :class:`Tensor`; when any input requires a gradient the op records a
backward closure on the output, and :func:`backward` walks those records in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, FormatError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the element type used by new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
    prev, _DEFAULT_DTYPE = _DEFAULT_DTYPE, dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Row-major float array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        if any(s < 1 for s in self.data.shape):
            raise DimensionError(f"all dimensions must be >= 1, got {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def _record(out_data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _record(a.data * s, (a,), lambda g: (g * s,))


def abs_(a: Tensor) -> Tensor:
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out.astype(x.dtype, copy=False), (a,), back)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------


def sum_(a: Tensor) -> Tensor:
    return _record(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _record(np.asarray(a.data.mean(), dtype=a.dtype), (a,), back)


def abs_sum(a: Tensor) -> Tensor:
    return sum_(abs_(a))


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record(np.ascontiguousarray(out), (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def crop(a: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` of a (B, C, H, W) tensor."""
    if h > a.shape[2] or w > a.shape[3]:
        raise DimensionError(f"crop: {(h, w)} exceeds {a.shape}")

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, :, :h, :w] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[:, :, :h, :w]), (a,), back)


def pixel_unshuffle(a: Tensor, r: int) -> Tensor:
    """(B, C, H, W) -> (B, C*r*r, H/r, W/r); output channel c*r*r + i*r + j holds x[c, r*y+i, r*x+j]."""
    b, c, h, w = _require_4d(a, "pixel_unshuffle")
    if h % r or w % r:
        raise DimensionError(f"pixel_unshuffle: spatial size {(h, w)} not divisible by {r}")
    out = a.data.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h // r, w // r)

    def back(g):
        return (g.reshape(b, c, r, r, h // r, w // r).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h, w),)

    return _record(np.ascontiguousarray(out), (a,), back)


def pixel_shuffle(a: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    b, c, h, w = _require_4d(a, "pixel_shuffle")
    if c % (r * r):
        raise DimensionError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    co = c // (r * r)
    out = a.data.reshape(b, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, co, h * r, w * r)

    def back(g):
        return (g.reshape(b, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c, h, w),)

    return _record(np.ascontiguousarray(out), (a,), back)


def _require_4d(a: Tensor, op: str):
    if a.ndim != 4:
        raise DimensionError(f"{op}: expected (B, C, H, W), got {a.shape}")
    return a.shape


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot contract {a.shape} with {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --------------------------------------------------------------------------
# normalization / softmax
# --------------------------------------------------------------------------


def softmax_lastdim(x: Tensor, bias=None) -> Tensor:
    """Row softmax over the last axis of ``x + bias``, with row-max subtraction."""
    z = x.data
    if bias is not None:
        bias_data = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=x.dtype)
        try:
            z = z + bias_data
        except ValueError:
            raise DimensionError(f"softmax_lastdim: bias {bias_data.shape} does not broadcast to {x.shape}") from None
        if z.shape != x.shape:
            raise DimensionError(f"softmax_lastdim: bias {bias_data.shape} does not broadcast to {x.shape}")
    y = _stable_softmax(z)
    return _record(y, (x,), lambda g: (_softmax_back(y, g),))


def region_softmax(x: Tensor, labels: np.ndarray, lam: float) -> Tensor:
    """Softmax of ``x + D`` where ``D[p, q]`` is 0 for equal labels and ``lam`` otherwise.

    ``x`` has shape (..., N, N).  The bias is shared by all leading dims (heads).
    """
    n = len(labels)
    if x.shape[-2:] != (n, n):
        raise DimensionError(f"region_softmax: logits {x.shape} do not match {n} labels")
    labels = np.asarray(labels)
    if n and (labels == labels[0]).all():
        y = _stable_softmax(x.data)  # one region: the bias is identically zero
    else:
        y = _kernels.region_softmax(x.data, labels, float(lam)).astype(x.dtype, copy=False)
    return _record(y, (x,), lambda g: (_softmax_back(y, g),))


def _stable_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_back(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``shift``."""
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/shift {shift.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return _record(out.astype(x.dtype, copy=False), (x, gain, shift), back)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation, x (B,C,H,W), w (O,C,k,k)."""
    k = w.shape[-1]
    if k == 1:
        return np.einsum("bchw,oc->bohw", x, w[:, :, 0, 0], optimize=True)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,H,W,k,k
    return np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with odd square kernel and size-preserving zero padding."""
    _require_4d(x, "conv2d")
    o, c, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be odd and square, got {w.shape}")
    if x.shape[1] != c:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight {w.shape} expects {c}")
    out = _correlate(x.data, w.data)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def back(g):
        if kh == 1:
            gw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True)[:, :, None, None]
        else:
            p = kh // 2
            xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
            win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _correlate(g, wf)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw.astype(w.dtype, copy=False), gb)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, lambda g: back(g)[: len(parents)])


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if w.shape[-2:] != (3, 3):
        raise DimensionError(f"conv3x3: kernel must be 3x3, got {w.shape}")
    return conv2d(x, w, b)


# --------------------------------------------------------------------------
# backward + finite-difference oracle
# --------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients are summed across fan-out.  Every reachable tensor with
    ``requires_grad`` gets ``.grad`` set and an entry in the returned map.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    out: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        out[node] = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return out


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-4, coords=None) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps``.

    ``f`` is evaluated on fresh tensors; ``x`` itself is left unchanged.  When
    ``coords`` (flat indices) is given, only those entries are filled.
    """
    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.copy())))
        flat[i] = orig - eps
        fm = float(f(Tensor(base.copy())))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


# --------------------------------------------------------------------------
# RATT binary tensor file
# --------------------------------------------------------------------------

_MAGIC = b"RATT"
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor(fh: BinaryIO, t) -> None:
    """Append one RATT record: magic, version, ndim, u64 dims, dtype code, LE row-major data."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _DTYPE_CODES.get(data.dtype)
    if code is None:
        raise FormatError(f"cannot serialize dtype {data.dtype}")
    fh.write(_MAGIC)
    fh.write(struct.pack("<II", 1, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(struct.pack("<B", code))
    fh.write(np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated RATT record while reading {what}")
    return buf


def read_tensor(fh: BinaryIO) -> Tensor:
    if _read_exact(fh, 4, "magic") != _MAGIC:
        raise FormatError("bad magic: not a RATT tensor record")
    version, ndim = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != 1:
        raise FormatError(f"unsupported RATT version {version}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "dims"))
    (code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise FormatError(f"unknown RATT dtype code {code}")
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    raw = _read_exact(fh, count * dtype.itemsize, "data")
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
    return Tensor(arr, dtype=dtype)


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    try:
        with open(path, "rb") as fh:
            return read_tensor(fh)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from None
