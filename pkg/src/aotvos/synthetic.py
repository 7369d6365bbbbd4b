"""Seeded toy videos: flat-coloured rectangles and ellipses drifting over a dark background."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError
from .fileio import image_to_bytes, write_pnm

SHAPES = ("rectangle", "ellipse")

# well separated hues; each sequence draws its colours from here
PALETTE = np.array([
    (0.95, 0.25, 0.20), (0.20, 0.80, 0.30), (0.25, 0.40, 0.95), (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.90), (0.20, 0.85, 0.90), (1.00, 0.60, 0.15), (0.60, 0.95, 0.60),
    (0.95, 0.95, 0.95), (0.55, 0.35, 0.20), (0.60, 0.60, 1.00), (1.00, 0.60, 0.70),
])


@dataclass(frozen=True)
class SyntheticSpec:
    size: tuple[int, int] = (64, 64)
    frames: int = 5
    objects: int = 4  # including background
    shapes: tuple[str, ...] = SHAPES
    max_speed: int = 2
    velocities: tuple[tuple[int, int], ...] | None = None
    occlusion: bool = False
    seed: int = 0
    identities: int = 10
    retries: int = 200
    noise: float = 0.02

    def __post_init__(self):
        h, w = self.size
        if h < 8 or w < 8:
            raise ConfigError("frames must be at least 8x8")
        if self.frames < 1:
            raise ConfigError("need at least one frame")
        if not 1 <= self.objects <= self.identities:
            raise ConfigError(f"{self.objects} object slots do not fit {self.identities} identities")
        if self.objects - 1 > len(PALETTE):
            raise ConfigError(f"at most {len(PALETTE)} shapes")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ConfigError(f"shape kinds must come from {SHAPES}")
        if self.velocities is not None and len(self.velocities) != self.objects - 1:
            raise ConfigError("one velocity per shape is required")
        if self.max_speed < 0 or self.noise < 0:
            raise ConfigError("speed and noise must be non-negative")


@dataclass(frozen=True)
class Shape:
    kind: str
    top: int
    left: int
    height: int
    width: int
    colour: tuple[float, float, float]
    velocity: tuple[int, int]

    def mask(self, size: tuple[int, int], top: int, left: int) -> np.ndarray:
        h, w = size
        rr = np.arange(h)[:, None]
        cc = np.arange(w)[None, :]
        if self.kind == "rectangle":
            return ((rr >= top) & (rr < top + self.height) & (cc >= left) & (cc < left + self.width))
        cy = top + (self.height - 1) / 2.0
        cx = left + (self.width - 1) / 2.0
        ry, rx = self.height / 2.0, self.width / 2.0
        return ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0


@dataclass
class SyntheticSequence:
    frames: list[np.ndarray]  # H x W x 3 floats in [0, 1]
    labels: list[np.ndarray]  # H x W integer rasters
    shapes: list[Shape]

    @property
    def n_objects(self) -> int:
        return len(self.shapes) + 1


def _trajectory(shape: Shape, size: tuple[int, int], frames: int) -> list[tuple[int, int]]:
    """Positions per frame; the velocity flips at the frame border so shapes stay inside."""
    h, w = size
    top, left = shape.top, shape.left
    vy, vx = shape.velocity
    out = []
    for _ in range(frames):
        out.append((top, left))
        if not 0 <= top + vy <= h - shape.height:
            vy = -vy
        if not 0 <= left + vx <= w - shape.width:
            vx = -vx
        top += vy
        left += vx
    return out


def render_frame(shapes: list[Shape], positions: list[tuple[int, int]], size: tuple[int, int],
                 rng: np.random.Generator | None = None, noise: float = 0.0):
    """Paint shapes back to front; later shapes occlude earlier ones and own their pixels."""
    h, w = size
    img = np.full((h, w, 3), 0.08)
    lab = np.zeros((h, w), dtype=np.int64)
    for i, (s, (top, left)) in enumerate(zip(shapes, positions), start=1):
        m = s.mask(size, top, left)
        img[m] = s.colour
        lab[m] = i
    if rng is not None and noise > 0:
        img = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)
    return img, lab


def _sample_shapes(spec: SyntheticSpec, rng: np.random.Generator) -> list[Shape]:
    h, w = spec.size
    k = spec.objects - 1
    colours = PALETTE[rng.permutation(len(PALETTE))[:k]]
    # crowded scenes get smaller shapes so a disjoint first frame stays likely
    hi_h = max(4, int(min(h / 3, 0.6 * h / np.sqrt(k))))
    hi_w = max(4, int(min(w / 3, 0.6 * w / np.sqrt(k))))
    shapes = []
    for i in range(k):
        sh = int(rng.integers(max(3, min(h // 6, hi_h // 2)), hi_h + 1))
        sw = int(rng.integers(max(3, min(w // 6, hi_w // 2)), hi_w + 1))
        sh, sw = min(sh, h), min(sw, w)
        top = int(rng.integers(0, h - sh + 1))
        left = int(rng.integers(0, w - sw + 1))
        if spec.velocities is not None:
            vel = tuple(int(v) for v in spec.velocities[i])
        else:
            vel = tuple(int(v) for v in rng.integers(-spec.max_speed, spec.max_speed + 1, size=2))
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        shapes.append(Shape(kind, top, left, sh, sw, tuple(float(c) for c in colours[i]), vel))
    return shapes


def _visible(shapes, positions, size) -> bool:
    _, lab = render_frame(shapes, positions, size)
    return all((lab == i).any() for i in range(1, len(shapes) + 1))


def _overlaps(shapes, positions, size) -> bool:
    cover = np.zeros(size, dtype=np.int64)
    for s, (top, left) in zip(shapes, positions):
        cover += s.mask(size, top, left)
    return bool((cover > 1).any())


def gen_synthetic(spec: SyntheticSpec) -> SyntheticSequence:
    """Deterministic for a given spec. Raises GenerationError when no valid layout is found."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.retries):
        shapes = _sample_shapes(spec, rng)
        paths = [_trajectory(s, spec.size, spec.frames) for s in shapes]
        per_frame = [[p[t] for p in paths] for t in range(spec.frames)]
        if _overlaps(shapes, per_frame[0], spec.size):
            continue
        if not spec.occlusion and any(_overlaps(shapes, pos, spec.size) for pos in per_frame[1:]):
            continue
        if not all(_visible(shapes, pos, spec.size) for pos in per_frame):
            continue
        break
    else:
        raise GenerationError(f"no valid placement of {spec.objects - 1} shapes after {spec.retries} tries")
    frames, labels = [], []
    noise_rng = np.random.default_rng([spec.seed, 1])
    for pos in per_frame:
        img, lab = render_frame(shapes, pos, spec.size, noise_rng, spec.noise)
        frames.append(img)
        labels.append(lab)
    return SyntheticSequence(frames, labels, shapes)


def write_sequence(seq: SyntheticSequence, out_dir) -> Path:
    """frames/00001.ppm ... and labels/00001.pgm ... under ``out_dir``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for t, (img, lab) in enumerate(zip(seq.frames, seq.labels), start=1):
        write_pnm(out / "frames" / f"{t:05d}.ppm", image_to_bytes(img))
        write_pnm(out / "labels" / f"{t:05d}.pgm", lab.astype(np.uint8))
    return out
