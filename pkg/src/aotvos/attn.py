"""Attention kernels: scaled dot-product, multi-head, long-term and windowed short-term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError
from .tensor import (Tensor, concat, matmul, mul, record, reshape, softmax_lastdim, take,
                     transpose, add)


@dataclass(frozen=True)
class AttentionHeadsConfig:
    heads: int
    channels: int

    def __post_init__(self):
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide {self.channels} channels")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass(frozen=True)
class SinePos2D:
    table: Tensor  # HW x C


@dataclass(frozen=True)
class RelPosBias:
    table: Tensor  # heads x lam x lam

    @classmethod
    def zeros(cls, heads: int, lam: int, dtype=None) -> "RelPosBias":
        return cls(Tensor(np.zeros((heads, lam, lam)), dtype=dtype))


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, bias=None, mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """softmax(Q K^T / sqrt(Ck) + bias) V over the last two axes.

    ``bias`` may be a tensor or an array; non-finite array entries act as a mask.
    ``mask`` (True = keep) removes keys explicitly.
    """
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention shapes disagree: Q {Q.shape}, K {K.shape}, V {V.shape}")
    logits = mul(matmul(Q, _swap_last(K)), 1.0 / np.sqrt(Q.shape[-1]))
    if bias is not None:
        if not isinstance(bias, Tensor):
            arr = np.asarray(bias, dtype=logits.dtype)
            finite = np.isfinite(arr)
            if not finite.all():
                mask = finite if mask is None else (mask & finite)
                arr = np.where(finite, arr, 0.0)
            bias = Tensor(arr, dtype=logits.dtype)
        logits = add(logits, bias)
    weights = softmax_lastdim(logits, mask)
    out = matmul(weights, V)
    return (out, weights) if return_weights else out


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., a, C) -> (..., heads, a, C/heads)."""
    *lead, a, c = x.shape
    if c % heads:
        raise ConfigError(f"{heads} heads do not divide {c} channels")
    y = reshape(x, (*lead, a, heads, c // heads))
    nl = len(lead)
    axes = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return transpose(y, axes)


def merge_heads(x: Tensor) -> Tensor:
    """(heads, a, d) -> (a, heads * d)."""
    h, a, d = x.shape
    return reshape(transpose(x, (1, 0, 2)), (a, h * d))


def multi_head(Q: Tensor, K: Tensor, V: Tensor, W_O: Tensor, cfg: AttentionHeadsConfig, bias=None,
               mask: np.ndarray | None = None, return_weights: bool = False):
    """Per-head attention on channel slices, concatenated, then projected by ``W_O``."""
    if Q.shape[-1] != cfg.channels:
        raise DimensionError(f"expected width {cfg.channels}, got {Q.shape[-1]}")
    out, weights = scaled_dot_attention(split_heads(Q, cfg.heads), split_heads(K, cfg.heads),
                                        split_heads(V, cfg.heads), bias=bias, mask=mask,
                                        return_weights=True)
    y = matmul(merge_heads(out), W_O)
    return (y, weights) if return_weights else y


def long_term_attention(Xt: Tensor, Xm: Tensor, Em: Tensor, Wk: Tensor, Wv: Tensor, W_O: Tensor,
                        cfg: AttentionHeadsConfig, return_weights: bool = False):
    """Non-local attention to memory; queries and keys share the ``Wk`` projection."""
    if Xm.shape != Em.shape:
        raise DimensionError(f"memory features {Xm.shape} and embeddings {Em.shape} differ")
    return multi_head(matmul(Xt, Wk), matmul(Xm, Wk), add(matmul(Xm, Wv), Em), W_O, cfg,
                      return_weights=return_weights)


# ---------------------------------------------------------------------------
# windowed short-term attention


def _check_window(lam: int) -> None:
    if lam < 1 or lam % 2 == 0:
        raise ConfigError(f"window size must be odd and positive, got {lam}")


def window_attend(q: Tensor, k: Tensor, v: Tensor, rel: Tensor, grid: tuple[int, int], lam: int,
                  return_weights: bool = False):
    """Fused neighbourhood attention on head-split tensors.

    q: heads x HW x d; k, v: heads x n x HW x d; rel: heads x lam x lam.
    Out-of-image window cells are excluded from the softmax.
    """
    _check_window(lam)
    h, w = grid
    heads, hw, d = q.shape
    if hw != h * w or k.shape[0] != heads or k.shape[2] != hw or v.shape[:3] != k.shape[:3]:
        raise DimensionError(f"window attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if rel.shape != (heads, lam, lam):
        raise DimensionError(f"relative bias must be {(heads, lam, lam)}, got {rel.shape}")
    scale = 1.0 / np.sqrt(d)
    qd, kd, vd = (np.ascontiguousarray(t.data) for t in (q, k, v))
    out, attn = kernels.window_attn_forward(qd, kd, vd, np.ascontiguousarray(rel.data), h, w, lam, scale)

    def bwd(g):
        return kernels.window_attn_backward(np.ascontiguousarray(g), qd, kd, vd, attn, h, w, lam, scale)

    res = record("window_attn", out, (q, k, v, rel), bwd)
    return (res, attn) if return_weights else res


def _stack_frames(frames) -> Tensor:
    if isinstance(frames, Tensor):
        return frames
    frames = list(frames)
    if not frames:
        raise DimensionError("short-term attention needs at least one frame")
    return concat([reshape(f, (1, *f.shape)) for f in frames], axis=0)


def _as_tokens(x: Tensor):
    if x.ndim == 3:
        h, w, c = x.shape
        return reshape(x, (h * w, c)), (h, w)
    raise DimensionError(f"expected an H x W x C tensor, got {x.shape}")


def short_term_from_projections(q: Tensor, K: Tensor, V: Tensor, rel: Tensor, grid: tuple[int, int],
                                lam: int, W_O: Tensor, cfg: AttentionHeadsConfig,
                                return_weights: bool = False):
    """Windowed attention on projected tokens: q is HW x C, K and V are n x HW x C."""
    kh = transpose(split_heads(K, cfg.heads), (1, 0, 2, 3))
    vh = transpose(split_heads(V, cfg.heads), (1, 0, 2, 3))
    res = window_attend(split_heads(q, cfg.heads), kh, vh, rel, grid, lam, return_weights=return_weights)
    out, attn = res if return_weights else (res, None)
    y = matmul(merge_heads(out), W_O)
    return (y, attn) if return_weights else y


def short_term_attention(Xt: Tensor, Xn, En, lam: int, rel: RelPosBias | Tensor, Wk: Tensor, Wv: Tensor,
                         W_O: Tensor, cfg: AttentionHeadsConfig) -> Tensor:
    """Attention of each location to the lam x lam windows around it in the n previous frames.

    Xt is H x W x C; Xn and En are n frames of H x W x C (a stacked tensor or a list).
    """
    _check_window(lam)
    table = rel.table if isinstance(rel, RelPosBias) else rel
    xt, grid = _as_tokens(Xt)
    xn = _stack_frames(Xn)
    en = _stack_frames(En)
    if xn.shape != en.shape or xn.shape[1:3] != grid:
        raise DimensionError(f"frame stacks disagree: X {xn.shape}, E {en.shape}, grid {grid}")
    n = xn.shape[0]
    c = xt.shape[1]
    xn = reshape(xn, (n, grid[0] * grid[1], c))
    en = reshape(en, (n, grid[0] * grid[1], c))
    y = short_term_from_projections(matmul(xt, Wk), matmul(xn, Wk), add(matmul(xn, Wv), en),
                                    table, grid, lam, W_O, cfg)
    return reshape(y, (*grid, y.shape[-1]))


def window_mask(grid: tuple[int, int], lam: int, n: int = 1):
    """Dense validity mask and relative-offset index for every (query, memory) pair.

    Returns ``(mask, offset)`` of shape HW x n*HW; ``offset`` is a*lam + b for
    memory cell (r + a - R, c + b - R) and 0 where masked.
    """
    h, w = grid
    r = (lam - 1) // 2
    rows = np.arange(h * w) // w
    cols = np.arange(h * w) % w
    dr = rows[None, :] - rows[:, None]
    dc = cols[None, :] - cols[:, None]
    valid = (np.abs(dr) <= r) & (np.abs(dc) <= r)
    offset = np.where(valid, (dr + r) * lam + (dc + r), 0)
    return np.tile(valid, (1, n)), np.tile(offset, (1, n))


def windowed_attention_oracle(Xt: Tensor, Xn, En, lam: int, rel: RelPosBias | Tensor, Wk: Tensor,
                              Wv: Tensor, W_O: Tensor, cfg: AttentionHeadsConfig) -> Tensor:
    """Reference short-term attention: full attention with an explicit window mask. O(H^2 W^2)."""
    _check_window(lam)
    table = rel.table if isinstance(rel, RelPosBias) else rel
    xt, grid = _as_tokens(Xt)
    xn = _stack_frames(Xn)
    en = _stack_frames(En)
    if xn.shape != en.shape or xn.shape[1:3] != grid:
        raise DimensionError(f"frame stacks disagree: X {xn.shape}, E {en.shape}, grid {grid}")
    n = xn.shape[0]
    c = xt.shape[1]
    hw = grid[0] * grid[1]
    xm = reshape(xn, (n * hw, c))
    em = reshape(en, (n * hw, c))
    mask, offset = window_mask(grid, lam, n)
    bias = take(reshape(table, (cfg.heads, lam * lam)), offset, axis=1)  # heads x HW x n*HW
    y = multi_head(matmul(xt, Wk), matmul(xm, Wk), add(matmul(xm, Wv), em), W_O, cfg,
                   bias=bias, mask=mask)
    return reshape(y, (*grid, y.shape[-1]))


def sine_pos_embed(h: int, w: int, c: int, temperature: float = 10000.0, dtype=None) -> SinePos2D:
    """Fixed 2-D sine/cosine codes; first C/2 channels encode the row, the rest the column."""
    if c % 4:
        raise ConfigError(f"sine positional codes need C divisible by 4, got {c}")
    half = c // 2
    dim = temperature ** (2 * (np.arange(half) // 2) / half)
    y = (np.arange(h) + 1) / h * 2 * np.pi
    x = (np.arange(w) + 1) / w * 2 * np.pi

    def code(pos):
        raw = pos[:, None] / dim[None, :]
        out = np.empty_like(raw)
        out[:, 0::2] = np.sin(raw[:, 0::2])
        out[:, 1::2] = np.cos(raw[:, 1::2])
        return out

    cy = np.broadcast_to(code(y)[:, None, :], (h, w, half))
    cx = np.broadcast_to(code(x)[None, :, :], (h, w, half))
    return SinePos2D(Tensor(np.concatenate([cy, cx], axis=-1).reshape(h * w, c), dtype=dtype))


def window_to_dense(attn: np.ndarray, grid: tuple[int, int], lam: int) -> np.ndarray:
    """Scatter windowed weights (heads x HW x n x lam^2) into dense heads x HW x n*HW form."""
    _check_window(lam)
    heads, hw, n, cells = attn.shape
    h, w = grid
    if hw != h * w or cells != lam * lam:
        raise DimensionError(f"window weights {attn.shape} do not match grid {grid} and window {lam}")
    r = (lam - 1) // 2
    rows, cols = np.divmod(np.arange(hw), w)
    a, b = np.divmod(np.arange(cells), lam)
    mr = rows[:, None] + a[None, :] - r
    mc = cols[:, None] + b[None, :] - r
    valid = (mr >= 0) & (mr < h) & (mc >= 0) & (mc < w)
    q_idx, c_idx = np.nonzero(valid)
    target = mr[q_idx, c_idx] * w + mc[q_idx, c_idx]
    dense = np.zeros((heads, hw, n * hw), dtype=attn.dtype)
    for f in range(n):
        dense[:, q_idx, f * hw + target] = attn[:, q_idx, f, c_idx]
    return dense
