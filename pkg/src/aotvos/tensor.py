"""Dense tensors, a recording tape and reverse-mode differentiation.

Tensors wrap a read-only numpy array. A tensor carries a ``node`` handle only
when it was produced on a :class:`Tape`; operations whose inputs carry no handle
are evaluated without recording anything. Every op checks its output for
non-finite values and raises :class:`NumericError` on NaN/Inf.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, DimensionError, NumericError, TapeError, AttentionDegenerateError

SINGLE = np.dtype(np.float32)
DOUBLE = np.dtype(np.float64)
PRECISIONS = {"single": SINGLE, "double": DOUBLE}

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return DOUBLE
    if isinstance(dtype, str) and dtype in PRECISIONS:
        return PRECISIONS[dtype]
    dt = np.dtype(dtype)
    if dt not in (SINGLE, DOUBLE):
        raise ContractError(f"unsupported dtype {dt}; use single or double")
    return dt


class Tensor:
    __slots__ = ("data", "node")
    __array_priority__ = 100

    def __init__(self, data, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (SINGLE, DOUBLE):
            dtype = data.dtype
        arr = np.array(data, dtype=resolve_dtype(dtype))
        arr.flags.writeable = False
        self.data = arr
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, node=None) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.node = node
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = "" if self.node is None else f", node={self.node[1]}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def _raise_not_scalar(t):
    raise ContractError(f"tensor of shape {t.shape} is not a scalar")


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations; backward walks it in reverse creation order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op: str, parents: tuple, backward_fn) -> int:
        self.nodes.append(_Node(op, parents, backward_fn))
        return len(self.nodes) - 1

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf and return a recorded alias of it."""
        if t.node is not None:
            raise TapeError("tensor is already recorded on a tape")
        return Tensor._wrap(t.data, (self, self._append("leaf", (), None)))

    def watch_all(self, params: dict) -> dict:
        return {k: self.watch(v) for k, v in params.items()}


class Gradients:
    """Adjoints produced by :func:`backward`, indexed by recorded tensors."""

    def __init__(self, tape: Tape, adjoints: list):
        self._tape = tape
        self._adj = adjoints

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None or t.node[0] is not self._tape:
            raise TapeError("tensor is not recorded on this tape")
        g = self._adj[t.node[1]]
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.node is not None and t.node[0] is self._tape


def backward(tape: Tape, loss: Tensor) -> Gradients:
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.node is None or loss.node[0] is not tape:
        raise TapeError("loss is not recorded on this tape")
    start = loss.node[1]
    adj: list = [None] * len(tape.nodes)
    adj[start] = np.ones_like(loss.data)
    nodes = tape.nodes
    for i in range(start, -1, -1):
        g = adj[i]
        node = nodes[i]
        if g is None or node.backward is None:
            continue
        grads = node.backward(g)
        for p, gp in zip(node.parents, grads):
            if p is None or gp is None:
                continue
            adj[p] = gp if adj[p] is None else adj[p] + gp
    return Gradients(tape, adj)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as the result of ``op`` and record it when any input is on a tape.

    ``backward_fn`` maps the output adjoint to one adjoint (or None) per input.
    """
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.node[0]
            elif t.node[0] is not tape:
                raise TapeError("operands are recorded on different tapes")
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")
    if tape is None:
        return Tensor._wrap(out)
    parents = tuple(None if t.node is None else t.node[1] for t in inputs)
    return Tensor._wrap(out, (tape, tape._append(op, parents, backward_fn)))


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    if a.dtype != b.dtype:
        raise ContractError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if (ad <= 0).any():
        raise NumericError("log of non-positive value")
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    return record("maximum", np.where(take_a, a.data, b.data), (a, b),
                  lambda g: (_unbroadcast(np.where(take_a, g, 0), a.shape),
                             _unbroadcast(np.where(take_a, 0, g), b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    return record("minimum", np.where(take_a, a.data, b.data), (a, b),
                  lambda g: (_unbroadcast(np.where(take_a, g, 0), a.shape),
                             _unbroadcast(np.where(take_a, 0, g), b.shape)))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    dt = tensors[0].dtype
    if any(t.dtype != dt for t in tensors):
        raise ContractError("dtype mismatch in concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the adjoint."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    n = a.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"index out of range for axis of length {n}")
    out = np.take(a.data, idx, axis=ax)
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(ga, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (ga,)

    return record("take", out, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[x] for x in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra and nonlinearities


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be 2-D against batched ``a``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", out, (a, b), bwd)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable bool array, True = keep) zeroes excluded entries.
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax over an empty last dimension")
    xd = x.data
    if mask is None:
        m = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - m)
    else:
        mask = np.broadcast_to(mask, xd.shape)
        if not mask.any(axis=-1).all():
            raise AttentionDegenerateError("a softmax row has every entry masked")
        shifted = np.where(mask, xd, -np.inf)
        m = shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, xd - m, 0.0)), 0.0).astype(xd.dtype)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("eps must be positive")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm affine shape must be ({c},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bwd(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", out.astype(xd.dtype, copy=False), (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with the error-function CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return record("gelu", out, (x,), bwd)


def depthwise_conv2d_5x5(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 5x5 correlation with zero padding of 2; x is H x W x C."""
    if x.ndim != 3:
        raise DimensionError("depthwise conv expects an H x W x C input")
    c = x.shape[2]
    if w.shape != (5, 5, c) or b.shape != (c,):
        raise DimensionError(f"depthwise kernel must be 5x5x{c} with bias ({c},)")
    if len({x.dtype, w.dtype, b.dtype}) != 1:
        raise ContractError("dtype mismatch in depthwise conv")
    xd, wd = x.data, w.data
    out = kernels.dwconv5_forward(xd, wd, b.data)
    return record("dwconv5", out, (x, w, b),
                  lambda g: kernels.dwconv5_backward(np.ascontiguousarray(g), xd, wd))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    cols = [xp[i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            for i in range(k) for j in range(k)]
    return np.stack(cols, axis=2).reshape(ho * wo, -1)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D correlation; x is H x W x Cin, w is k x k x Cin x Cout."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d shape mismatch: {x.shape} with kernel {w.shape}")
    if b.shape != (w.shape[3],):
        raise DimensionError("conv2d bias must match output channels")
    k, cin, cout = w.shape[0], w.shape[2], w.shape[3]
    h, wd_ = x.shape[:2]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd_ + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d output would be empty")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    wmat = w.data.reshape(k * k * cin, cout)
    if k == 1 and stride == 1:
        cols = xp.reshape(ho * wo, cin)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    out = (cols @ wmat + b.data).reshape(ho, wo, cout)
    xshape = x.shape
    pshape = xp.shape

    def bwd(g):
        g2 = g.reshape(ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(ho, wo, k, k, cin)
        gxp = np.zeros(pshape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, i, j, :]
        gx = gxp[padding:padding + xshape[0], padding:padding + xshape[1], :] if padding else gxp
        return gx, gw, gb

    return record("conv2d", out, (x, w, b), bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    xd = x.data
    out = np.repeat(np.repeat(xd, factor, axis=0), factor, axis=1)
    h, w = xd.shape[:2]

    def bwd(g):
        return (g.reshape(h, factor, w, factor, *g.shape[2:]).sum(axis=(1, 3)),)

    return record("upsample_nearest", out, (x,), bwd)


def subpixel_upsample(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Learned 2x upsampling (a stride-2, 2x2 transposed convolution).

    x: H x W x Cin; w: Cin x 2 x 2 x Cout; every output cell of a 2x2 block has
    its own projection, so sub-cell position is visible to later layers.
    """
    h, wd, cin = x.shape
    if w.ndim != 4 or w.shape[0] != cin or w.shape[1:3] != (2, 2):
        raise DimensionError(f"upsampling weights {w.shape} do not fit input {x.shape}")
    cout = w.shape[3]
    y = matmul(reshape(x, (h * wd, cin)), reshape(w, (cin, 4 * cout)))
    y = transpose(reshape(y, (h, wd, 2, 2, cout)), (0, 2, 1, 3, 4))
    return add(reshape(y, (2 * h, 2 * wd, cout)), b)


def bilinear_matrix(n_out: int, n_in: int, dtype=DOUBLE) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, rows sum to one."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize of an H x W x C tensor (separable, half-pixel centres)."""
    h, w = x.shape[:2]
    mh = bilinear_matrix(height, h, x.dtype)
    mw = bilinear_matrix(width, w, x.dtype)
    out = np.einsum("ia,abc,jb->ijc", mh, x.data, mw, optimize=True)

    def bwd(g):
        return (np.einsum("ia,ijc,jb->abc", mh, g, mw, optimize=True),)

    return record("resize_bilinear", out, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ContractError("step h must be positive")
    base = x.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = _scalar(f(Tensor(xp.reshape(base.shape), dtype=base.dtype)))
        fm = _scalar(f(Tensor(xm.reshape(base.shape), dtype=base.dtype)))
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def directional_diff(f: Callable[[], float], apply_offset: Callable[[float], None], h: float = 1e-5) -> float:
    """Central difference of ``f`` along a direction installed by ``apply_offset(step)``."""
    apply_offset(h)
    fp = _scalar(f())
    apply_offset(-h)
    fm = _scalar(f())
    apply_offset(0.0)
    return (fp - fm) / (2.0 * h)


def _scalar(v) -> float:
    val = v.item() if isinstance(v, Tensor) else float(v)
    if not np.isfinite(val):
        raise NumericError("function value is not finite")
    return val


# ---------------------------------------------------------------------------
# raw tensor files

_MAGIC = b"AOTT"
_CODES = {SINGLE: 0, DOUBLE: 1}
_FROM_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = resolve_dtype(arr.dtype)
    head = _MAGIC + struct.pack("<BBB", 1, _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_FROM_CODE[_CODES[dt]]).tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 7 or buf[:4] != _MAGIC:
        raise ContractError("not an AOTT tensor file")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != 1 or code not in _FROM_CODE:
        raise ContractError(f"unsupported tensor file (version={version}, dtype={code})")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    offset = 7 + 4 * rank
    dt = _FROM_CODE[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != offset + count * dt.itemsize:
        raise ContractError("tensor payload length does not match its header")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True))


def save_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: str | Path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


def zeros(shape: Iterable[int], dtype=None) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=resolve_dtype(dtype)))
