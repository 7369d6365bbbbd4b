"""Timing harnesses: unified vs per-object ensemble scaling, and kernel backends."""
from __future__ import annotations

import contextlib
import gc
import os
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .engine import EngineConfig, post_ensemble_baseline, run_sequence
from .errors import ConfigError
from .synthetic import SyntheticSpec, gen_synthetic

WARMUP = 2
ROUND = 5
UNSTABLE_IQR = 0.5


def thread_setting() -> str:
    return os.environ.get("AOT_THREADS", "")


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS/OpenMP pools at AOT_THREADS when it is set."""
    raw = thread_setting()
    if not raw:
        yield
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AOT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("AOT_THREADS must be >= 1")
    with threadpool_limits(limits=n):
        yield


@contextlib.contextmanager
def quiet_gc():
    """Collect once up front, then keep the cyclic collector out of timed loops."""
    was = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def median_iqr(samples) -> tuple[float, float]:
    a = np.asarray(samples, dtype=np.float64)
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return float(med), float(q3 - q1)


@dataclass(frozen=True)
class BenchRow:
    mode: str
    size: int
    objects: int
    median_micros: float
    iqr_micros: float
    repeats: int

    @property
    def unstable(self) -> bool:
        return self.iqr_micros > UNSTABLE_IQR * self.median_micros


CSV_COLUMNS = "mode,size,objects,median_micros,iqr_micros,repeats"


def scaling_clip(size: int, targets: int, frames: int, seed: int, identities: int):
    spec = SyntheticSpec(size=(size, size), frames=frames, objects=targets + 1, occlusion=True, seed=seed,
                         identities=identities)
    return gen_synthetic(spec)


def bench_scaling(cfg: EngineConfig, params: dict, sizes=(64,), objects=(1, 2, 5, 10), repeats: int = 20,
                  modes=("unified", "ensemble"), seed: int = 0, warmup: int = WARMUP,
                  round_size: int = ROUND) -> list[BenchRow]:
    """Per-frame forward time against the number of annotated targets.

    ``unified`` propagates all targets in one pass; ``ensemble`` runs one binary
    pass per target and merges. Repeats are taken in short rounds that cycle
    through every configuration, so slow drift in host speed lands on all of
    them alike. Each round discards its first ``warmup`` frames.
    """
    if repeats < 2:
        raise ConfigError("at least two timed repeats are needed for a median and IQR")
    for m in modes:
        if m not in ("unified", "ensemble"):
            raise ConfigError(f"unknown benchmark mode {m!r}")
    chunks = [len(c) for c in np.array_split(np.arange(repeats), max(1, -(-repeats // round_size)))]
    keys = [(size, n, mode) for size in sizes for n in objects for mode in modes]
    clips = {(size, n): scaling_clip(size, n, warmup + max(chunks) + 1, seed + n, cfg.identities)
             for size in sizes for n in objects}
    samples = {k: [] for k in keys}

    def timed(size, n, mode, frames):
        clip = clips[(size, n)]
        if mode == "unified":
            res = run_sequence(clip.frames[:frames], clip.labels[0], cfg, params, seed=seed, n_objects=n + 1).results
        else:
            res = post_ensemble_baseline(clip.frames[:frames], clip.labels[0], cfg, params, seed=seed)
        return [r.micros for r in res]

    with thread_limit():
        timed(*keys[0], warmup + 1)  # prime allocators and kernels once, untimed
        for k in chunks:
            for key in keys:
                with quiet_gc():
                    samples[key].extend(timed(*key, warmup + k + 1)[warmup:])
    rows = []
    for size, n, mode in keys:
        med, iqr = median_iqr(samples[(size, n, mode)])
        rows.append(BenchRow(mode, size, n, med, iqr, repeats))
    return rows


def rows_to_csv(rows: list, columns: str = CSV_COLUMNS) -> str:
    lines = [f"# AOT_THREADS={thread_setting() or 'unset'}", columns]
    for r in rows:
        vals = [getattr(r, c) for c in columns.split(",")]
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in vals))
    return "\n".join(lines) + "\n"


def read_csv(text: str) -> list[dict[str, str]]:
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    head = lines[0].split(",")
    return [dict(zip(head, l.split(","))) for l in lines[1:]]


def scaling_ratios(rows: list[BenchRow], mode: str, size: int) -> dict[int, float]:
    """time(N) / time(smallest N) for one mode and image size."""
    sel = sorted((r for r in rows if r.mode == mode and r.size == size), key=lambda r: r.objects)
    if not sel:
        return {}
    base = sel[0].median_micros
    return {r.objects: r.median_micros / base for r in sel}


# ---------------------------------------------------------------------------
# kernel backends


@dataclass(frozen=True)
class KernelRow:
    kernel: str
    backend: str
    median_micros: float
    iqr_micros: float
    repeats: int


KERNEL_COLUMNS = "kernel,backend,median_micros,iqr_micros,repeats"


def _kernel_cases(rng: np.random.Generator, dtype=np.float32):
    h = w = 16
    c, heads, d, n, lam, m = 64, 2, 16, 2, 7, 10

    def r(*shape):
        return np.ascontiguousarray(rng.normal(size=shape).astype(dtype))

    x, k5, b5 = r(h, w, c), r(5, 5, c), r(c)
    g5 = r(h, w, c)
    q, kk, vv, rel = r(heads, h * w, d), r(heads, n, h * w, d), r(heads, n, h * w, d), r(heads, lam, lam)
    scale = 1.0 / np.sqrt(d)
    # each backend differentiates through the weights its own forward produced
    attn = {b: np.ascontiguousarray(kernels.get(b).window_attn_forward(q, kk, vv, rel, h, w, lam, scale)[1])
            for b in kernels.available()}
    ga = r(heads, h * w, d)
    ids = np.ascontiguousarray(rng.integers(0, m, size=(64, 64)).astype(np.int64))
    bank = r(m, 16, 16, c)
    gp = r(4, 4, c)
    return {
        "dwconv5_forward": lambda mod: mod.dwconv5_forward(x, k5, b5),
        "dwconv5_backward": lambda mod: mod.dwconv5_backward(g5, x, k5),
        "window_attn_forward": lambda mod: mod.window_attn_forward(q, kk, vv, rel, h, w, lam, scale),
        "window_attn_backward": lambda mod: mod.window_attn_backward(ga, q, kk, vv, attn[mod.NAME], h, w, lam, scale),
        "patch_embed_forward": lambda mod: mod.patch_embed_forward(ids, bank),
        "patch_embed_backward": lambda mod: mod.patch_embed_backward(gp, ids, bank.shape),
    }


def bench_kernels(repeats: int = 20, seed: int = 0, warmup: int = WARMUP) -> list[KernelRow]:
    if repeats < 2:
        raise ConfigError("at least two timed repeats are needed for a median and IQR")
    cases = _kernel_cases(np.random.default_rng(seed))
    rows = []
    with thread_limit():
        for name, fn in cases.items():
            for backend in kernels.available():
                mod = kernels.get(backend)
                samples = []
                with quiet_gc():
                    for i in range(warmup + repeats):
                        t0 = time.perf_counter_ns()
                        fn(mod)
                        if i >= warmup:
                            samples.append((time.perf_counter_ns() - t0) / 1000.0)
                med, iqr = median_iqr(samples)
                rows.append(KernelRow(name, backend, med, iqr, repeats))
    return rows
