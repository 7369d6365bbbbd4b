"""End-to-end propagation: encoder, LSTT stack, FPN decoder and identity decoding.

The engine is functional: parameters are a flat ``dict[str, Tensor]``, so the
same code path runs inference (plain tensors) and training (tape-watched
tensors). Memory holds per-layer projected keys and identity-carrying values.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .attn import AttentionHeadsConfig, sine_pos_embed
from .errors import CapacityError, ConfigError, DimensionError, StateError
from .ident import (Assignment, decode_select, pad_labels, patch_bank_array, patch_id_embed,
                    sample_assignment)
from .lstt import (FIRST_FRAME, NORMAL, LayerMemory, StackConfig, block_params, init_block,
                   lstt_stack_forward)
from .tensor import (PRECISIONS, Tensor, add, concat, conv2d, gelu, layer_norm, mul, reshape, resize_bilinear,
                     subpixel_upsample, take, transpose)

VARIANT_LAYERS = {"aot-t": 1, "aot-s": 2, "aot-b": 3, "aot-l": 3}

# An even kernel with stride 2 and padding 1 centres output cell i on input
# 2i + 0.5, so every level lines up with half-pixel upsampling in the decoder.
ENC_KERNEL = 4
ENC_INPUT_GAIN = 4.0
ENC_GAIN = 1.2
DEC_GROUPS = 8


@dataclass(frozen=True)
class EngineConfig:
    variant: str = "aot-s"
    layers: int = 2
    channels: int = 256
    heads: int = 8
    window: int = 15
    short_frames: int = 1
    identities: int = 10
    delta_train: int = 2
    delta_test: int = 5
    precision: str = "single"
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    enc_channels: tuple[int, int, int] = (16, 32, 64)
    dec_channels: int = 128
    stochastic_depth: float = 0.0
    patch: int = 16

    def __post_init__(self):
        if self.variant != "custom" and self.variant not in VARIANT_LAYERS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant in VARIANT_LAYERS and self.layers != VARIANT_LAYERS[self.variant]:
            raise ConfigError(f"{self.variant} has {VARIANT_LAYERS[self.variant]} layers, got {self.layers}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.identities < 2:
            raise ConfigError("need at least two identities")
        if self.delta_train < 1 or self.delta_test < 1:
            raise ConfigError("memory stride must be >= 1")
        if self.patch != 16:
            raise ConfigError("the encoder is fixed at 1/16 resolution")
        AttentionHeadsConfig(self.heads, self.channels)
        self.stack_config()

    @classmethod
    def preset(cls, variant: str, **overrides) -> "EngineConfig":
        variant = variant.lower()
        if variant not in VARIANT_LAYERS:
            raise ConfigError(f"unknown variant {variant!r}")
        return cls(variant=variant, layers=VARIANT_LAYERS[variant], **overrides)

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)

    @property
    def dtype(self) -> np.dtype:
        return PRECISIONS[self.precision]

    def heads_config(self) -> AttentionHeadsConfig:
        return AttentionHeadsConfig(self.heads, self.channels)

    def stack_config(self) -> StackConfig:
        return StackConfig(self.heads_config(), self.window, self.short_frames, self.layers,
                           self.stochastic_depth)

    def stores_long_term(self, t: int, training: bool = False) -> bool:
        """Whether frame ``t`` (1-based) joins the long-term memory."""
        if t == 1:
            return True
        if self.variant != "aot-l":
            return False
        delta = self.delta_train if training else self.delta_test
        return (t - 1) % delta == 0

    def to_record(self) -> dict[str, str]:
        rec = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            rec[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, str]) -> "EngineConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in rec:
                continue
            raw = rec[f.name]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = tuple(int(x) for x in raw.split(","))
            elif isinstance(default, bool):
                kw[f.name] = raw == "True"
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: EngineConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.dtype
    c = cfg.channels
    e0, e1, e2 = cfg.enc_channels
    dec = cfg.dec_channels
    p: dict[str, Tensor] = {}

    def conv(name, k, cin, cout, gain=np.sqrt(2.0)):
        p[f"{name}.w"] = Tensor(rng.normal(0.0, gain / np.sqrt(k * k * cin), size=(k, k, cin, cout)), dtype=dt)
        p[f"{name}.b"] = Tensor(np.zeros(cout), dtype=dt)

    def norm(name, ch):
        p[f"{name}.gn.g"] = Tensor(np.ones(ch), dtype=dt)
        p[f"{name}.gn.b"] = Tensor(np.zeros(ch), dtype=dt)

    def up(name, cin, cout):
        p[f"{name}.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(cin), size=(cin, 2, 2, cout)), dtype=dt)
        p[f"{name}.b"] = Tensor(np.zeros(cout), dtype=dt)

    # Gains chosen so activations stay near unit scale down the stride-2 stack;
    # with plain He gains the [0, 1] pixels shrink to ~0.05 by 1/16 resolution
    # and the identity embedding swamps all appearance information.
    for i, (cin, cout) in enumerate(zip((3, e0, e1, e2), (e0, e1, e2, c))):
        conv(f"enc.{i}", ENC_KERNEL, cin, cout, np.sqrt(2.0) * (ENC_INPUT_GAIN if i == 0 else ENC_GAIN))
    p["id.bank"] = Tensor(patch_bank_array(rng, cfg.identities, c, cfg.patch), dtype=dt)
    scfg = cfg.stack_config()
    for l in range(cfg.layers):
        for k, v in init_block(rng, scfg, dt).items():
            p[f"lstt.{l}.{k}"] = v
    # Laterals start at zero so the first updates see only the block outputs,
    # which carry the identity signal; appearance detail is blended in later.
    conv("dec.in", 1, cfg.layers * c, c)
    norm("dec.in", c)
    up("dec.up8", c, c)
    conv("dec.lat8", 1, e2, c, 0.0)
    conv("dec.conv8", 3, c, dec)
    norm("dec.conv8", dec)
    up("dec.up4", dec, dec)
    conv("dec.lat4", 1, e1, dec, 0.0)
    conv("dec.conv4", 3, dec, dec)
    norm("dec.conv4", dec)
    conv("dec.head", 1, dec, cfg.identities, 1.0)
    return p


def stack_blocks(params: dict, cfg: EngineConfig) -> list[dict]:
    return [block_params(params, l) for l in range(cfg.layers)]


# ---------------------------------------------------------------------------
# encoder / decoder


@dataclass
class Encoded:
    feature: Tensor  # H/16 x W/16 x C
    skip4: Tensor  # H/4 x W/4 x e1
    skip8: Tensor  # H/8 x W/8 x e2


def encode_frame(image, params: dict, cfg: EngineConfig | None = None) -> Encoded:
    """Four stride-2 4x4 conv + GELU stages down to 1/16 resolution."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image), dtype=params["enc.0.w"].dtype)
    if x.ndim != 3 or x.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got {x.shape}")
    if x.shape[0] % 16 or x.shape[1] % 16:
        raise DimensionError(f"image {x.shape[0]}x{x.shape[1]} is not a multiple of 16")
    feats = []
    for i in range(4):
        x = gelu(conv2d(x, params[f"enc.{i}.w"], params[f"enc.{i}.b"], stride=2, padding=1))
        feats.append(x)
    return Encoded(feats[3], feats[1], feats[2])


def _conv(x, params, name, padding=0):
    return conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding=padding)


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int = DEC_GROUPS) -> Tensor:
    """Normalise each group of channels over space and the group, then scale per channel."""
    h, w, c = x.shape
    g = math.gcd(groups, c)
    unit = Tensor(np.ones(h * w * c // g), dtype=x.dtype), Tensor(np.zeros(h * w * c // g), dtype=x.dtype)
    y = transpose(reshape(x, (h * w, g, c // g)), (1, 0, 2))
    y = layer_norm(reshape(y, (g, h * w * c // g)), *unit)
    y = reshape(transpose(reshape(y, (g, h * w, c // g)), (1, 0, 2)), (h, w, c))
    return add(mul(y, gain), bias)


def _conv_gn(x, params, name, padding=0):
    return gelu(group_norm(_conv(x, params, name, padding), params[f"{name}.gn.g"], params[f"{name}.gn.b"]))


def _up(x, params, name):
    return subpixel_upsample(x, params[f"{name}.w"], params[f"{name}.b"])


def decode_logits(outputs: list[Tensor], enc: Encoded, params: dict, grid: tuple[int, int]) -> Tensor:
    """FPN decoder from the L block outputs to per-identity logits at 1/4 resolution."""
    if not outputs:
        raise StateError("decoder needs the LSTT block outputs")
    h, w = grid
    maps = [reshape(o, (h, w, o.shape[-1])) if o.ndim == 2 else o for o in outputs]
    x = concat(maps, axis=-1) if len(maps) > 1 else maps[0]
    if x.shape[-1] != params["dec.in.w"].shape[2]:
        raise StateError(f"decoder expects {params['dec.in.w'].shape[2]} channels of block outputs, "
                         f"got {x.shape[-1]}")
    x = _conv_gn(x, params, "dec.in")
    x = add(_up(x, params, "dec.up8"), _conv(enc.skip8, params, "dec.lat8"))
    x = _conv_gn(x, params, "dec.conv8", padding=1)
    x = add(_up(x, params, "dec.up4"), _conv(enc.skip4, params, "dec.lat4"))
    x = _conv_gn(x, params, "dec.conv4", padding=1)
    return _conv(x, params, "dec.head")


def decode_frame(outputs: list[Tensor], enc: Encoded, a: Assignment, params: dict, grid: tuple[int, int],
                 out_shape: tuple[int, int] | None = None) -> tuple[Tensor, Tensor]:
    """Returns (identity logits at 1/4 res, object probabilities at full res)."""
    LD = decode_logits(outputs, enc, params, grid)
    h4, w4, m = LD.shape
    prob = decode_select(reshape(LD, (h4 * w4, m)), a)
    prob = resize_bilinear(reshape(prob, (h4, w4, a.n)), 4 * h4, 4 * w4)
    if out_shape is not None and out_shape != prob.shape[:2]:
        prob = take(take(prob, np.arange(out_shape[0]), axis=0), np.arange(out_shape[1]), axis=1)
    return LD, prob


@lru_cache(maxsize=32)
def _pos_table(h: int, w: int, c: int, dtype: str):
    return sine_pos_embed(h, w, c, dtype=dtype)


def _prepare_image(image, dtype) -> Tensor:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got {arr.shape}")
    h, w = arr.shape[:2]
    ph, pw = (-h) % 16, (-w) % 16
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)))
    return Tensor(arr, dtype=dtype)


# ---------------------------------------------------------------------------
# memory


@dataclass
class MemoryEntry:
    frame: int
    key: Tensor  # HW x C
    value: Tensor  # HW x C, projected value plus identity embedding


@dataclass
class MemoryState:
    assignment: Assignment
    frame_shape: tuple[int, int]
    grid: tuple[int, int]
    long_term: list[list[MemoryEntry]]
    short_term: list[list[MemoryEntry]]
    cursor: int = 1

    @property
    def n_objects(self) -> int:
        return self.assignment.n

    def long_term_indices(self, layer: int = 0) -> list[int]:
        return [e.frame for e in self.long_term[layer]]

    def short_term_indices(self, layer: int = 0) -> list[int]:
        return [e.frame for e in self.short_term[layer]]

    def view(self, layer: int) -> LayerMemory:
        lt = self.long_term[layer]
        st = self.short_term[layer]
        if not lt or not st:
            raise StateError(f"layer {layer} memory is empty")
        if len(lt) == 1:
            lk, lv = lt[0].key, lt[0].value
        else:
            lk = concat([e.key for e in lt], axis=0)
            lv = concat([e.value for e in lt], axis=0)
        sk = concat([reshape(e.key, (1, *e.key.shape)) for e in st], axis=0)
        sv = concat([reshape(e.value, (1, *e.value.shape)) for e in st], axis=0)
        return LayerMemory(layer, lk, lv, sk, sv)


@dataclass
class LayerCache:
    key: Tensor
    value: Tensor  # without identity embedding


@dataclass
class FrameResult:
    prob: Tensor  # H x W x N
    labels: np.ndarray  # H x W, argmax of prob
    micros: float
    caches: list[LayerCache] = field(default_factory=list)
    attention: list[tuple[np.ndarray, np.ndarray]] | None = None
    logits: Tensor | None = None
    pass_micros: list[float] | None = None


def _reference_labels(labels, n_objects: int | None, m: int) -> tuple[np.ndarray, int]:
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise DimensionError("reference labels must be an H x W raster")
    if lab.size and lab.min() < 0:
        raise DimensionError("labels must be non-negative")
    lab = lab.astype(np.int64)
    n = int(lab.max()) + 1 if n_objects is None else int(n_objects)
    if n > m:
        raise CapacityError(f"{n} object slots (incl. background) exceed the {m} identities")
    if lab.max() >= n:
        raise CapacityError(f"label {lab.max()} does not fit {n} object slots")
    return lab, n


def init_first_frame(image, labels, cfg: EngineConfig, params: dict, seed=None, n_objects: int | None = None,
                     assignment: Assignment | None = None, capture: bool = False) -> MemoryState:
    """Sample an identity assignment and cache frame 1 in long- and short-term memory."""
    lab, n = _reference_labels(labels, n_objects, cfg.identities)
    img = _prepare_image(image, cfg.dtype)
    if img.shape[:2] != pad_labels(lab).shape:
        raise DimensionError(f"image {img.shape[:2]} and labels {lab.shape} differ in size")
    a = assignment if assignment is not None else sample_assignment(cfg.seed if seed is None else seed, n,
                                                                    cfg.identities)
    if a.n != n:
        raise CapacityError(f"assignment covers {a.n} slots, labels need {n}")
    enc = encode_frame(img, params, cfg)
    h, w = enc.feature.shape[:2]
    E = patch_id_embed(pad_labels(lab), params["id.bank"], a)
    pos = _pos_table(h, w, cfg.channels, cfg.precision)
    out = lstt_stack_forward(reshape(enc.feature, (h * w, cfg.channels)), (h, w), stack_blocks(params, cfg),
                             cfg.stack_config(), FIRST_FRAME, embedding=E, pos=pos, capture=capture)
    long_term, short_term = [], []
    for b in out.blocks:
        entry = MemoryEntry(1, b.key, add(b.value, E))
        long_term.append([entry])
        short_term.append([entry])
    return MemoryState(a, tuple(lab.shape), (h, w), long_term, short_term, cursor=1)


def propagate_frame(image, state: MemoryState | None, cfg: EngineConfig, params: dict,
                    capture: bool = False, drop_rng: np.random.Generator | None = None) -> FrameResult:
    """Predict the object probabilities of one frame from memory; memory is not modified."""
    if state is None or not state.long_term or not state.long_term[0]:
        raise StateError("memory is not initialised; call init_first_frame first")
    t0 = time.perf_counter_ns()
    img = _prepare_image(image, cfg.dtype)
    if img.shape[:2] != (state.grid[0] * 16, state.grid[1] * 16):
        raise DimensionError(f"frame of size {img.shape[:2]} does not match the memory grid {state.grid}")
    enc = encode_frame(img, params, cfg)
    h, w = state.grid
    pos = _pos_table(h, w, cfg.channels, cfg.precision)
    mems = [state.view(l) for l in range(cfg.layers)]
    out = lstt_stack_forward(reshape(enc.feature, (h * w, cfg.channels)), (h, w), stack_blocks(params, cfg),
                             cfg.stack_config(), NORMAL, mems, pos=pos, capture=capture, drop_rng=drop_rng)
    LD, prob = decode_frame(out.outputs, enc, state.assignment, params, (h, w), state.frame_shape)
    labels = prob.data.argmax(axis=-1)
    micros = (time.perf_counter_ns() - t0) / 1000.0
    caches = [LayerCache(b.key, b.value) for b in out.blocks]
    attention = [(b.long_attention, b.short_attention) for b in out.blocks] if capture else None
    return FrameResult(prob, labels, micros, caches, attention, LD)


def update_memory(state: MemoryState, t: int, labels, caches: list[LayerCache], cfg: EngineConfig,
                  params: dict, training: bool = False) -> MemoryState:
    """Write frame ``t`` into memory using hard labels; the write is a stop-gradient."""
    if t < 2:
        raise StateError("frame 1 is written by init_first_frame")
    lab = np.asarray(labels).astype(np.int64)
    if lab.shape != state.frame_shape:
        raise DimensionError(f"labels {lab.shape} do not match frame size {state.frame_shape}")
    E = patch_id_embed(pad_labels(lab), params["id.bank"], state.assignment).detach()
    long_term = [list(x) for x in state.long_term]
    short_term = [list(x) for x in state.short_term]
    store_long = cfg.stores_long_term(t, training)
    for l, c in enumerate(caches):
        entry = MemoryEntry(t, c.key.detach(), add(c.value.detach(), E))
        short_term[l] = (short_term[l] + [entry])[-cfg.short_frames:]
        if store_long:
            long_term[l].append(entry)
    return MemoryState(state.assignment, state.frame_shape, state.grid, long_term, short_term, cursor=t)


# ---------------------------------------------------------------------------
# sequences


@dataclass
class SequenceRun:
    results: list[FrameResult]
    state: MemoryState
    summary: dict[str, float] = field(default_factory=dict)


def _check_frames(frames) -> list[np.ndarray]:
    frames = [np.asarray(f) for f in frames]
    if len(frames) < 2:
        raise DimensionError("a sequence needs at least two frames")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise DimensionError(f"frame {i + 1} has size {f.shape}, expected {shape}")
    return frames


def run_sequence(frames, ref_labels, cfg: EngineConfig, params: dict, seed=None, gt_labels=None,
                 n_objects: int | None = None, capture: bool = False) -> SequenceRun:
    """Initialise on frame 1, then propagate and update for frames 2..T."""
    from .metrics import sequence_scores

    frames = _check_frames(frames)
    state = init_first_frame(frames[0], ref_labels, cfg, params, seed=seed, n_objects=n_objects)
    results = []
    for t, frame in enumerate(frames[1:], start=2):
        res = propagate_frame(frame, state, cfg, params, capture=capture)
        state = update_memory(state, t, res.labels, res.caches, cfg, params)
        results.append(res)
    summary = {"frames": float(len(frames)), "objects": float(state.n_objects),
               "mean_micros": float(np.mean([r.micros for r in results]))}
    if gt_labels is not None:
        summary.update(sequence_scores([r.labels for r in results], list(gt_labels)[1:], state.n_objects))
    return SequenceRun(results, state, summary)


def ensemble_probs(fg: np.ndarray, mode: str = "soft_aggregation", eps: float = 1e-6) -> np.ndarray:
    """Merge per-object foreground probabilities (k x ...) into k+1 channels (background first).

    ``softmax``: softmax over [0, logit(p_1), ..., logit(p_k)], background as the
    zero-logit reference. ``soft_aggregation``: odds normalisation with the
    background probability taken as 1 - max_i p_i.
    """
    p = np.clip(np.asarray(fg, dtype=np.float64), eps, 1.0 - eps)
    if mode == "softmax":
        logits = np.concatenate([np.zeros((1, *p.shape[1:])), np.log(p / (1.0 - p))], axis=0)
        logits -= logits.max(axis=0, keepdims=True)
        e = np.exp(logits)
        out = e / e.sum(axis=0, keepdims=True)
    elif mode in ("soft_aggregation", "softagg"):
        bg = np.clip(1.0 - p.max(axis=0, keepdims=True), eps, 1.0 - eps)
        full = np.concatenate([bg, p], axis=0)
        odds = full / (1.0 - full)
        out = odds / odds.sum(axis=0, keepdims=True)
    else:
        raise ConfigError(f"unknown ensemble mode {mode!r}")
    return np.moveaxis(out, 0, -1)


def post_ensemble_baseline(frames, ref_labels, cfg: EngineConfig, params: dict,
                           mode: str = "soft_aggregation", seed=None) -> list[FrameResult]:
    """One binary (target vs rest) engine run per annotated target, merged per frame."""
    frames = _check_frames(frames)
    ref = np.asarray(ref_labels).astype(np.int64)
    targets = int(ref.max())
    if targets < 1:
        raise StateError("the reference mask has no annotated target")
    base = cfg.seed if seed is None else seed
    states = [init_first_frame(frames[0], (ref == i).astype(np.int64), cfg, params, seed=base + i, n_objects=2)
              for i in range(1, targets + 1)]
    results = []
    for t, frame in enumerate(frames[1:], start=2):
        t0 = time.perf_counter_ns()
        passes, fg, micros = [], [], []
        for st in states:
            r = propagate_frame(frame, st, cfg, params)
            passes.append(r)
            fg.append(r.prob.data[..., 1])
            micros.append(r.micros)
        prob = ensemble_probs(np.stack(fg), mode)
        labels = prob.argmax(axis=-1)
        total = (time.perf_counter_ns() - t0) / 1000.0
        states = [update_memory(st, t, (labels == i).astype(np.int64), r.caches, cfg, params)
                  for i, (st, r) in enumerate(zip(states, passes), start=1)]
        results.append(FrameResult(Tensor(prob), labels, total, pass_micros=micros))
    return results
