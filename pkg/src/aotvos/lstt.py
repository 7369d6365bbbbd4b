"""Long short-term transformer blocks and the L-layer stack.

A block is four pre-norm residual sub-layers applied in order: self-attention,
long-term attention to the memory frames, windowed short-term attention to the
previous frames, and a GELU feed-forward with a 5x5 depthwise convolution.
Long- and short-term attention share the layer's key/value projections, so one
cached (key, value) pair per frame serves both.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attn import AttentionHeadsConfig, SinePos2D, multi_head, short_term_from_projections
from .errors import ConfigError, DimensionError, StateError
from .tensor import (Tensor, add, depthwise_conv2d_5x5, gelu, layer_norm, matmul, mul, reshape,
                     resolve_dtype)

FIRST_FRAME = "first_frame"
NORMAL = "normal"

BLOCK_KEYS = (
    "ln_sa.g", "ln_sa.b", "sa.wq", "sa.wk", "sa.wv", "sa.wo",
    "ln_lt.g", "ln_lt.b", "wk", "wv", "lt.wo",
    "ln_st.g", "ln_st.b", "st.wo", "rel",
    "ln_ff.g", "ln_ff.b", "ff.w1", "ff.b1", "ff.dw", "ff.dwb", "ff.w2", "ff.b2",
)


@dataclass(frozen=True)
class StackConfig:
    heads: AttentionHeadsConfig
    window: int = 15
    short_frames: int = 1
    layers: int = 2
    stochastic_depth: float = 0.0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("an LSTT stack needs at least one layer")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window size must be odd, got {self.window}")
        if self.short_frames < 1:
            raise ConfigError("short-term memory needs n >= 1")

    @property
    def channels(self) -> int:
        return self.heads.channels


@dataclass(frozen=True)
class LayerMemory:
    """Cached keys and identity-carrying values visible to one layer."""

    layer: int
    long_keys: Tensor  # T*HW x C
    long_values: Tensor  # T*HW x C, projected values plus identity embedding
    short_keys: Tensor  # n x HW x C
    short_values: Tensor


@dataclass
class BlockOutput:
    out: Tensor  # HW x C
    key: Tensor  # this frame's projected keys, for the memory cache
    value: Tensor  # projected values without identity embedding
    long_attention: np.ndarray | None = None  # heads x HW x T*HW
    short_attention: np.ndarray | None = None  # heads x HW x n x lam*lam


@dataclass
class StackOutput:
    outputs: list[Tensor] = field(default_factory=list)
    blocks: list[BlockOutput] = field(default_factory=list)


def init_block(rng: np.random.Generator, cfg: StackConfig, dtype=None) -> dict[str, Tensor]:
    c = cfg.channels
    hidden = 4 * c
    dt = resolve_dtype(dtype)

    def lin(fan_in, fan_out, gain=1.0):
        return Tensor(rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)), dtype=dt)

    def const(shape, value):
        return Tensor(np.full(shape, value, dtype=np.float64), dtype=dt)

    p = {}
    for ln in ("ln_sa", "ln_lt", "ln_st", "ln_ff"):
        p[f"{ln}.g"] = const((c,), 1.0)
        p[f"{ln}.b"] = const((c,), 0.0)
    for name in ("sa.wq", "sa.wk", "sa.wv", "wk", "wv"):
        p[name] = lin(c, c)
    for name in ("sa.wo", "lt.wo", "st.wo"):
        p[name] = lin(c, c, 0.5)
    p["rel"] = const((cfg.heads.heads, cfg.window, cfg.window), 0.0)
    p["ff.w1"] = lin(c, hidden)
    p["ff.b1"] = const((hidden,), 0.0)
    p["ff.dw"] = Tensor(rng.normal(0.0, 0.2, size=(5, 5, hidden)), dtype=dt)
    p["ff.dwb"] = const((hidden,), 0.0)
    p["ff.w2"] = lin(hidden, c, 0.5)
    p["ff.b2"] = const((c,), 0.0)
    return p


def ffn_forward(x: Tensor, grid: tuple[int, int], p: dict) -> Tensor:
    """W2 . dwconv5x5(GELU(W1 . x)); the caller adds the residual."""
    h, w = grid
    if x.shape[0] != h * w:
        raise DimensionError(f"{x.shape[0]} tokens do not fill a {h}x{w} grid")
    hid = gelu(add(matmul(x, p["ff.w1"]), p["ff.b1"]))
    hid = reshape(hid, (h, w, hid.shape[-1]))
    hid = depthwise_conv2d_5x5(hid, p["ff.dw"], p["ff.dwb"])
    hid = reshape(hid, (h * w, hid.shape[-1]))
    return add(matmul(hid, p["ff.w2"]), p["ff.b2"])


def _keep(rng, rate: float) -> float:
    if rng is None or rate <= 0.0:
        return 1.0
    return 0.0 if rng.random() < rate else 1.0 / (1.0 - rate)


def lstt_block_forward(x: Tensor, grid: tuple[int, int], p: dict, cfg: StackConfig, mode: str = NORMAL,
                       memory: LayerMemory | None = None, embedding: Tensor | None = None,
                       pos: SinePos2D | None = None, layer: int = 0, capture: bool = False,
                       drop_rng: np.random.Generator | None = None) -> BlockOutput:
    """One LSTT block on HW x C tokens.

    In ``first_frame`` mode the long- and short-term sub-layers attend to the
    current frame itself, with ``embedding`` (its identity embedding) added to
    the values. In ``normal`` mode ``memory`` must be the view for ``layer``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (grid[0] * grid[1], x.shape[-1]))
    if mode == FIRST_FRAME:
        if embedding is None:
            raise StateError("first-frame mode needs the reference identity embedding")
    elif mode == NORMAL:
        if memory is None:
            raise StateError(f"layer {layer} has no memory in normal mode")
        if memory.layer != layer:
            raise StateError(f"layer {layer} was handed the memory of layer {memory.layer}")
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    hc = cfg.heads

    xs = layer_norm(x, p["ln_sa.g"], p["ln_sa.b"])
    qk = xs if pos is None else add(xs, pos.table)
    sa = multi_head(matmul(qk, p["sa.wq"]), matmul(qk, p["sa.wk"]), matmul(xs, p["sa.wv"]), p["sa.wo"], hc)
    keep = _keep(drop_rng, cfg.stochastic_depth)
    x1 = add(x, sa if keep == 1.0 else mul(sa, keep))

    xl = layer_norm(x1, p["ln_lt.g"], p["ln_lt.b"])
    key = matmul(xl, p["wk"])
    value = matmul(xl, p["wv"])
    if mode == FIRST_FRAME:
        ident_value = add(value, embedding)
        long_k, long_v = key, ident_value
        short_k = reshape(key, (1, *key.shape))
        short_v = reshape(ident_value, (1, *ident_value.shape))
    else:
        long_k, long_v = memory.long_keys, memory.long_values
        short_k, short_v = memory.short_keys, memory.short_values
    lt, lt_w = multi_head(key, long_k, long_v, p["lt.wo"], hc, return_weights=True)
    x2 = add(x1, lt)

    xq = matmul(layer_norm(x2, p["ln_st.g"], p["ln_st.b"]), p["wk"])
    st, st_w = short_term_from_projections(xq, short_k, short_v, p["rel"], grid, cfg.window, p["st.wo"], hc,
                                           return_weights=True)
    x3 = add(x2, st)

    ff = ffn_forward(layer_norm(x3, p["ln_ff.g"], p["ln_ff.b"]), grid, p)
    keep = _keep(drop_rng, cfg.stochastic_depth)
    out = add(x3, ff if keep == 1.0 else mul(ff, keep))
    if squeeze:
        out = reshape(out, (*grid, out.shape[-1]))
    return BlockOutput(out, key, value,
                       lt_w.data if capture else None,
                       st_w if capture else None)


def block_params(params: dict, layer: int) -> dict:
    prefix = f"lstt.{layer}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def lstt_stack_forward(x0: Tensor, grid: tuple[int, int], blocks: list[dict], cfg: StackConfig,
                       mode: str = NORMAL, memories: list[LayerMemory] | None = None,
                       embedding: Tensor | None = None, pos: SinePos2D | None = None, capture: bool = False,
                       drop_rng: np.random.Generator | None = None) -> StackOutput:
    """Run every block in order; returns all L block outputs (they all feed the decoder)."""
    if not blocks:
        raise ConfigError("an LSTT stack needs at least one layer")
    if mode == NORMAL and (memories is None or len(memories) != len(blocks)):
        raise StateError("normal mode needs one memory view per layer")
    res = StackOutput()
    x = x0
    for l, p in enumerate(blocks):
        b = lstt_block_forward(x, grid, p, cfg, mode, None if memories is None else memories[l],
                               embedding, pos, layer=l, capture=capture, drop_rng=drop_rng)
        res.outputs.append(b.out)
        res.blocks.append(b)
        x = b.out
    return res
