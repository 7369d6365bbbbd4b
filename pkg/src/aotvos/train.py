"""AdamW and a sequential trainer that overfits the synthetic toy videos."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import EngineConfig, init_first_frame, init_params, propagate_frame, run_sequence, update_memory
from .errors import ConfigError, NumericError
from .fileio import write_pnm, write_record
from .losses import LossConfig, segmentation_loss
from .metrics import region_j
from .synthetic import SyntheticSequence, SyntheticSpec, gen_synthetic
from .tensor import Tape, Tensor, add, backward, mul

DIVERGED = 1e3


@dataclass(frozen=True)
class TrainConfig:
    seq_len: int = 5
    steps: int = 500
    lr: float = 2e-3
    min_lr: float = 2e-4
    weight_decay: float = 0.01
    seed: int = 0
    teacher_forcing: bool = False
    bootstrap_warmup: float = 0.2
    batch: int = 4
    augment: bool = True
    sequences: int = 8
    held_out: int = 2
    objects: int = 4  # including background
    max_speed: int = 3

    def __post_init__(self):
        if self.seq_len < 2:
            raise ConfigError("training sequences need at least two frames")
        if self.steps < 0 or self.batch < 1 or self.sequences < 1:
            raise ConfigError("steps, batch and sequences must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")
        if not 0.0 <= self.bootstrap_warmup <= 1.0:
            raise ConfigError("bootstrap warmup is a fraction of the steps")

    def learning_rate(self, step: int) -> float:
        """Polynomial decay (power 0.9) from ``lr`` to ``min_lr``."""
        if self.steps <= 1 or self.lr == 0:
            return self.lr
        frac = min(step / (self.steps - 1), 1.0)
        return self.min_lr + (self.lr - self.min_lr) * (1.0 - frac) ** 0.9

    def bootstrap_ratio(self, step: int, final: float) -> float:
        """Linear warmup from 1.0 (plain CE) down to ``final``."""
        span = self.bootstrap_warmup * self.steps
        if span <= 0 or step >= span:
            return final
        return 1.0 + (final - 1.0) * step / span


class AdamW:
    """Adaptive moments with weight decay applied directly to the weights."""

    def __init__(self, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8,
                 lr_scale: dict[str, float] | None = None):
        self.weight_decay = weight_decay
        self.lr_scale = dict(lr_scale or {})
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for k, p in params.items():
            g = np.asarray(grads.get(k, 0.0), dtype=np.float64)
            g = np.broadcast_to(g, p.shape)
            m = self.m.get(k)
            m = (1.0 - self.b1) * g if m is None else self.b1 * m + (1.0 - self.b1) * g
            v = self.v.get(k)
            v = (1.0 - self.b2) * g * g if v is None else self.b2 * v + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            step = lr * self.lr_scale.get(k, 1.0)
            w = p.data.astype(np.float64)
            w = w - step * self.weight_decay * w - step * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[k] = Tensor(w, dtype=p.dtype)
        return out


def make_optimizer(tcfg: TrainConfig, ecfg: EngineConfig) -> AdamW:
    # A patch filled with one identity sums P*P sub-identities, so an equal
    # per-cell step would move that sum P*P times faster than any other weight.
    return AdamW(tcfg.weight_decay, lr_scale={"id.bank": 1.0 / ecfg.patch ** 2})


@dataclass
class Clip:
    frames: list[np.ndarray]
    labels: list[np.ndarray]
    n_objects: int
    seed: int  # identity-assignment seed


def _augment(clip: Clip, rng: np.random.Generator) -> Clip:
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    perm = rng.permutation(3)

    def tf(a):
        a = np.rot90(a, k, axes=(0, 1))
        return np.ascontiguousarray(a[:, ::-1] if flip else a)

    frames = [tf(f)[..., perm] for f in clip.frames]
    labels = [tf(l) for l in clip.labels]
    return Clip(frames, labels, clip.n_objects, clip.seed)


def sequence_loss(params: dict, clip: Clip, ecfg: EngineConfig, lcfg: LossConfig, ratio: float,
                  teacher_forcing: bool = False, drop_rng=None) -> Tensor:
    """Summed loss over frames 2..T; frame 1 is the reference."""
    state = init_first_frame(clip.frames[0], clip.labels[0], ecfg, params, seed=clip.seed,
                             n_objects=clip.n_objects)
    total = None
    for t in range(2, len(clip.frames) + 1):
        r = propagate_frame(clip.frames[t - 1], state, ecfg, params, drop_rng=drop_rng)
        loss = segmentation_loss(r.prob, clip.labels[t - 1], lcfg, ratio)
        total = loss if total is None else add(total, loss)
        mem = clip.labels[t - 1] if teacher_forcing else r.labels
        state = update_memory(state, t, mem, r.caches, ecfg, params, training=True)
    return total


def train_step(batch: list[Clip], params: dict, opt: AdamW, ecfg: EngineConfig, tcfg: TrainConfig,
               lcfg: LossConfig, step: int = 0, drop_rng=None) -> tuple[dict, float]:
    """One AdamW update on the mean sequence loss of ``batch``."""
    tape = Tape()
    watched = tape.watch_all(params)
    ratio = tcfg.bootstrap_ratio(step, lcfg.bootstrap_ratio)
    try:
        losses = [sequence_loss(watched, c, ecfg, lcfg, ratio, tcfg.teacher_forcing, drop_rng) for c in batch]
        loss = losses[0]
        for extra in losses[1:]:
            loss = add(loss, extra)
        loss = mul(loss, 1.0 / len(batch))
    except NumericError as exc:
        raise NumericError(f"step {step}: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"step {step}: loss is not finite")
    grads = backward(tape, loss)
    g = {k: grads[watched[k]] for k in params}
    return opt.step(params, g, tcfg.learning_rate(step)), value


def make_clips(tcfg: TrainConfig, ecfg: EngineConfig, held_out: bool = False) -> list[Clip]:
    count = tcfg.held_out if held_out else tcfg.sequences
    base = 100_000 * (tcfg.seed + 1) + (50_000 if held_out else 0)
    clips = []
    for i in range(count):
        spec = SyntheticSpec(size=ecfg.image_size, frames=tcfg.seq_len, objects=tcfg.objects, seed=base + i,
                             max_speed=tcfg.max_speed,
                             identities=ecfg.identities)
        seq: SyntheticSequence = gen_synthetic(spec)
        clips.append(Clip(seq.frames, seq.labels, seq.n_objects, base + i))
    return clips


@dataclass
class TrainReport:
    losses: list[float]
    j: float
    f: float
    jf: float
    seconds: float
    per_sequence: list[dict[str, float]] = field(default_factory=list)
    predictions: list[list[np.ndarray]] = field(default_factory=list)
    ground_truth: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def record(self) -> dict:
        return {"steps": len(self.losses), "final_loss": self.final_loss, "J": self.j, "F": self.f,
                "JF": self.jf, "seconds": self.seconds, "held_out": len(self.per_sequence)}

    def write(self, out_dir) -> None:
        """report.txt, loss.csv and the held-out predictions as PGM rasters."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_record(out / "report.txt", self.record())
        lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(self.losses)]
        (out / "loss.csv").write_text("\n".join(lines) + "\n")
        for s, (preds, gts) in enumerate(zip(self.predictions, self.ground_truth)):
            d = out / f"heldout{s:02d}"
            d.mkdir(exist_ok=True)
            for t, (p, g) in enumerate(zip(preds, gts), start=2):
                write_pnm(d / f"pred{t:05d}.pgm", p.astype(np.uint8))
                write_pnm(d / f"gt{t:05d}.pgm", g.astype(np.uint8))


def evaluate(params: dict, clips: list[Clip], ecfg: EngineConfig) -> TrainReport:
    per, preds, gts = [], [], []
    for c in clips:
        run = run_sequence(c.frames, c.labels[0], ecfg, params, seed=c.seed, gt_labels=c.labels,
                           n_objects=c.n_objects)
        per.append(run.summary)
        preds.append([r.labels for r in run.results])
        gts.append(list(c.labels[1:]))
    j = float(np.mean([s["J"] for s in per]))
    f = float(np.mean([s["F"] for s in per]))
    return TrainReport([], j, f, 0.5 * (j + f), 0.0, per, preds, gts)


def mean_region_j(preds: list[list[np.ndarray]], gts: list[list[np.ndarray]], n_objects: int) -> float:
    """Per-frame object-mean J, averaged over frames, then over sequences."""
    seqs = []
    for p_seq, g_seq in zip(preds, gts):
        frames = [np.mean([region_j(p, g, i) for i in range(1, n_objects)]) for p, g in zip(p_seq, g_seq)]
        seqs.append(np.mean(frames))
    return float(np.mean(seqs))


def train_toy(tcfg: TrainConfig, ecfg: EngineConfig, lcfg: LossConfig | None = None, params: dict | None = None,
              log=None) -> tuple[dict, TrainReport]:
    """Fit the engine to seeded synthetic clips and score held-out clips."""
    lcfg = lcfg or LossConfig()
    t0 = time.perf_counter()
    params = init_params(ecfg, seed=tcfg.seed) if params is None else dict(params)
    clips = make_clips(tcfg, ecfg)
    rng = np.random.default_rng(tcfg.seed)
    drop_rng = np.random.default_rng([tcfg.seed, 7]) if ecfg.stochastic_depth > 0 else None
    opt = make_optimizer(tcfg, ecfg)
    losses = []
    for step in range(tcfg.steps):
        batch = []
        for _ in range(tcfg.batch):
            c = clips[int(rng.integers(len(clips)))]
            c = Clip(c.frames, c.labels, c.n_objects, int(rng.integers(1 << 31)))
            batch.append(_augment(c, rng) if tcfg.augment else c)
        params, value = train_step(batch, params, opt, ecfg, tcfg, lcfg, step, drop_rng)
        if value > DIVERGED:
            raise NumericError(f"step {step}: loss {value:.4g} diverged past {DIVERGED:g}")
        losses.append(value)
        if log is not None:
            log(step, value)
    report = evaluate(params, make_clips(tcfg, ecfg, held_out=True), ecfg)
    report.losses = losses
    report.seconds = time.perf_counter() - t0
    return params, report
