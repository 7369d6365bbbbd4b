"""Command-line entry point: ``aotvos <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or malformed/mismatched
inputs, 3 more objects than identities, 4 unstable benchmark timings.
"""
from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .attn import window_to_dense
from .bench import (CSV_COLUMNS, KERNEL_COLUMNS, bench_kernels, bench_scaling, rows_to_csv, thread_limit)
from .diagnostics import patch_fractions, propagate
from .engine import (VARIANT_LAYERS, EngineConfig, init_first_frame, init_params, post_ensemble_baseline,
                     propagate_frame, run_sequence, update_memory)
from .errors import AOTError, CapacityError, ConfigError, DimensionError, FormatError, MaskError
from .fileio import (list_frames, load_checkpoint, read_frames, read_label_dir, read_labels, save_checkpoint,
                     write_pnm, write_record)
from .metrics import sequence_scores
from .synthetic import SyntheticSpec, gen_synthetic, write_sequence
from .tensor import save_tensor
from .train import TrainConfig, train_toy

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CAPACITY, EXIT_UNSTABLE = 0, 1, 2, 3, 4
BASELINES = {"none": None, "softmax": "softmax", "softagg": "soft_aggregation"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return vals[0], vals[1]


def _model_args(p: argparse.ArgumentParser, variant_default: str | None = "aot-s") -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--weights", type=Path, help="checkpoint directory written by 'train'")
    src.add_argument("--random-init", action="store_true", help="use freshly initialised weights")
    p.add_argument("--variant", choices=sorted(VARIANT_LAYERS), default=variant_default)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--precision", choices=("single", "double"), default="single")
    p.add_argument("--seed", type=int, default=0)


def _load_model(args, require_source: bool = True) -> tuple[EngineConfig, dict]:
    if args.weights is not None:
        rec, params = load_checkpoint(args.weights)
        cfg = EngineConfig.from_record(rec)
        if args.variant is not None and args.variant != cfg.variant:
            raise ConfigError(f"{args.weights}: checkpoint is {cfg.variant}, --variant asked for {args.variant}")
        cfg = cfg.replace(seed=args.seed)
        return cfg, params
    if require_source and not args.random_init:
        raise ConfigError("give --weights DIR or --random-init")
    cfg = EngineConfig.preset(args.variant or "aot-s", channels=args.channels, heads=args.heads,
                              window=args.window, identities=args.identities, precision=args.precision,
                              seed=args.seed)
    return cfg, init_params(cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(size=args.size, frames=args.frames, objects=args.objects, max_speed=args.max_speed,
                         occlusion=args.occlusion, seed=args.seed, identities=args.identities,
                         shapes=tuple(args.shapes.split(",")))
    seq = gen_synthetic(spec)
    out = write_sequence(seq, args.out)
    write_record(out / "spec.txt", {"size": f"{spec.size[0]}x{spec.size[1]}", "frames": spec.frames,
                                    "objects": spec.objects, "max_speed": spec.max_speed,
                                    "occlusion": spec.occlusion, "seed": spec.seed})
    print(f"wrote {spec.frames} frames to {out}")
    return EXIT_OK


def _read_inputs(args):
    frames = read_frames(args.frames)
    ref = read_labels(args.ref)
    if ref.shape != frames[0].shape[:2]:
        raise DimensionError(f"{args.ref}: labels {ref.shape} do not match frame size {frames[0].shape[:2]}")
    for path, f in zip(list_frames(args.frames), frames):
        if f.shape != frames[0].shape:
            raise DimensionError(f"{path}: size {f.shape[:2]} differs from the first frame")
    return frames, ref


def cmd_run(args) -> int:
    cfg, params = _load_model(args)
    frames, ref = _read_inputs(args)
    if len(frames) < 2:
        raise DimensionError(f"{args.frames}: need at least two frames")
    gts = None
    if args.gt is not None:
        gts = read_label_dir(args.gt)
        if len(gts) != len(frames):
            raise DimensionError(f"{args.gt}: {len(gts)} label rasters for {len(frames)} frames")
    out = Path(args.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    targets = int(ref.max())
    mode = BASELINES[args.baseline]
    timing = ["frame,objects,micros"]
    if mode is None:
        if targets + 1 > cfg.identities:
            raise CapacityError(f"{args.ref}: {targets} targets plus background exceed {cfg.identities} identities")
        run = run_sequence(frames, ref, cfg, params, seed=args.seed)
        labels = [r.labels for r in run.results]
        for t, r in enumerate(run.results, start=2):
            timing.append(f"{t},{targets},{r.micros!r}")
        passes = 1
    else:
        results = post_ensemble_baseline(frames, ref, cfg, params, mode=mode, seed=args.seed)
        labels = [r.labels for r in results]
        for t, r in enumerate(results, start=2):
            for m in r.pass_micros:
                timing.append(f"{t},1,{m!r}")
        passes = targets
    write_pnm(out / "labels" / "00001.pgm", ref.astype(np.uint8))
    for t, lab in enumerate(labels, start=2):
        write_pnm(out / "labels" / f"{t:05d}.pgm", lab.astype(np.uint8))
    micros = [float(x.split(",")[2]) for x in timing[1:]]
    metrics = {"variant": cfg.variant, "baseline": args.baseline, "frames": len(frames), "objects": targets,
               "passes_per_frame": passes, "mean_frame_micros": float(np.sum(micros) / (len(frames) - 1))}
    if gts is not None:
        metrics.update(sequence_scores(labels, gts[1:], targets + 1))
    write_record(out / "metrics.txt", metrics)
    (out / "timing.csv").write_text("\n".join(timing) + "\n")
    print(f"segmented {len(frames) - 1} frames into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = EngineConfig.preset(args.variant, channels=args.channels, heads=args.heads, window=args.window,
                              identities=args.identities, image_size=args.size, seed=args.seed)
    tcfg = TrainConfig(seq_len=args.seq_len, steps=args.steps, lr=args.lr, min_lr=args.lr / 10,
                       weight_decay=args.weight_decay, seed=args.seed, teacher_forcing=args.teacher_forcing,
                       batch=args.batch, sequences=args.sequences, held_out=args.held_out,
                       objects=args.objects, max_speed=args.max_speed)
    every = max(1, args.steps // 10)

    def log(step, loss):
        if args.verbose and (step % every == 0 or step == args.steps - 1):
            print(f"step {step} loss {loss:.5f}", flush=True)

    params, report = train_toy(tcfg, cfg, params=None, log=log)
    out = Path(args.out)
    save_checkpoint(out / "weights", cfg.to_record(), params)
    report.write(out)
    print(f"J={report.j:.4f} F={report.f:.4f} final_loss={report.final_loss:.5f}")
    return EXIT_OK


def cmd_bench_scaling(args) -> int:
    if args.repeats < 2:
        raise ConfigError("--repeats must be at least 2 for a median and IQR")
    cfg, params = _load_model(args)
    need = max(args.objects) + 1
    if args.weights is None and cfg.identities < need:
        cfg = cfg.replace(identities=need)
        params = init_params(cfg)
    if need > cfg.identities:
        raise CapacityError(f"{max(args.objects)} targets plus background exceed {cfg.identities} identities")
    rows = bench_scaling(cfg, params, args.sizes, args.objects, args.repeats, seed=args.seed)
    text = rows_to_csv(rows)
    if args.out is not None:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    unstable = [r for r in rows if r.unstable]
    if unstable:
        for r in unstable:
            print(f"unstable: {r.mode} size={r.size} objects={r.objects} iqr={r.iqr_micros:.1f} "
                  f"median={r.median_micros:.1f}", file=sys.stderr)
        return EXIT_UNSTABLE
    return EXIT_OK


def cmd_bench_kernels(args) -> int:
    if args.repeats < 2:
        raise ConfigError("--repeats must be at least 2 for a median and IQR")
    rows = bench_kernels(args.repeats, seed=args.seed)
    text = rows_to_csv(rows, KERNEL_COLUMNS)
    if args.out is not None:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    cfg, params = _load_model(args)
    if not 1 <= args.layer <= cfg.layers:
        raise ConfigError(f"--layer must lie in 1..{cfg.layers}, got {args.layer}")
    frames, ref = _read_inputs(args)
    if not 2 <= args.frame <= len(frames):
        raise ConfigError(f"--frame must lie in 2..{len(frames)}, got {args.frame}")
    n = int(ref.max()) + 1
    state = init_first_frame(frames[0], ref, cfg, params, seed=args.seed)
    memory_labels = {1: ref}
    for t in range(2, args.frame):
        r = propagate_frame(frames[t - 1], state, cfg, params)
        state = update_memory(state, t, r.labels, r.caches, cfg, params)
        memory_labels[t] = r.labels
    res = propagate_frame(frames[args.frame - 1], state, cfg, params, capture=True)
    l = args.layer - 1
    long_w, short_w = res.attention[l]
    grid = state.grid
    if args.kind == "long":
        dense = long_w
        sources = state.long_term_indices(l)
    else:
        dense = window_to_dense(short_w, grid, cfg.window)
        sources = state.short_term_indices(l)
    mem = np.concatenate([patch_fractions(memory_labels[s], n) for s in sources], axis=0)
    prop = propagate(dense, mem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "attention.aott", dense)
    h, w = grid
    for i in range(n):
        raster = prop[:, i].reshape(h, w)
        save_tensor(out / f"object{i}.aott", raster)
        preview = np.kron(raster, np.ones((16, 16)))
        write_pnm(out / f"object{i}.pgm", np.clip(np.rint(preview * 255), 0, 255).astype(np.uint8))
    sums = dense.sum(axis=-1)
    lines = ["head,query,sum"]
    for hd in range(sums.shape[0]):
        lines.extend(f"{hd},{q},{float(sums[hd, q])!r}" for q in range(sums.shape[1]))
    (out / "rowsums.csv").write_text("\n".join(lines) + "\n")
    write_record(out / "meta.txt", {"layer": args.layer, "kind": args.kind, "frame": args.frame,
                                    "sources": ",".join(str(s) for s in sources), "grid": f"{h}x{w}",
                                    "objects": n, "heads": cfg.heads})
    print(f"wrote {n} propagated masks to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aotvos", description="Multi-object mask propagation with identity embeddings.")
    parser.add_argument("--backend", choices=("native", "numpy"), help="kernel backend override")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a seeded toy video")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--objects", type=int, default=4, help="object slots including background")
    p.add_argument("--max-speed", type=int, default=2)
    p.add_argument("--shapes", default="rectangle,ellipse")
    p.add_argument("--occlusion", action="store_true")
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("run", help="segment a sequence from its first-frame mask")
    p.add_argument("--frames", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gt", type=Path, help="ground-truth label directory for J/F")
    p.add_argument("--baseline", choices=sorted(BASELINES), default="none")
    _model_args(p, None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="fit the toy model on synthetic videos")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=sorted(VARIANT_LAYERS), default="aot-s")
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seq-len", type=int, default=5)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--weight-decay", type=float, default=TrainConfig.weight_decay)
    p.add_argument("--batch", type=int, default=TrainConfig.batch)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--held-out", type=int, default=2)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--max-speed", type=int, default=TrainConfig.max_speed)
    p.add_argument("--teacher-forcing", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench-scaling", help="per-frame time against object count")
    p.add_argument("--sizes", type=_int_list, default=[64])
    p.add_argument("--objects", type=_int_list, default=[1, 2, 5, 10])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out", type=Path)
    _model_args(p, None)
    p.set_defaults(func=cmd_bench_scaling)

    p = sub.add_parser("bench-kernels", help="compiled against numpy kernel timings")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_kernels)

    p = sub.add_parser("dump-attention", help="propagate memory masks through one attention map")
    p.add_argument("--frames", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--layer", type=int, required=True, help="1-based layer index")
    p.add_argument("--kind", choices=("long", "short"), required=True)
    p.add_argument("--frame", type=int, required=True, help="1-based frame index, at least 2")
    _model_args(p, None)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command in ("run", "bench-scaling", "dump-attention") and args.weights is None:
        if args.variant is None:
            args.variant = "aot-s"
    prev = kernels.use(args.backend) if args.backend else None
    try:
        with thread_limit():
            return args.func(args)
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (ConfigError, DimensionError, FormatError, MaskError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AOTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if prev is not None:
            kernels.use(prev)


if __name__ == "__main__":
    sys.exit(main())
