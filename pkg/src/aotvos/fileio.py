"""Binary PGM/PPM rasters, key=value records and checkpoint directories."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor, decode_tensor, encode_tensor

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: truncated header")
        fields.append(m.group(2))
        pos = m.end()
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise FormatError(f"{path}: malformed header")
    magic = fields[0]
    try:
        w, h, maxval = (int(x) for x in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad size or maxval ({w}x{h}, {maxval})")
    return magic, w, h, maxval, pos + 1


def decode_pnm(buf: bytes, path="<bytes>") -> np.ndarray:
    """Decode a P5 (H x W) or P6 (H x W x 3) raster into an integer array."""
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval, start = _header(buf, path)
    chans = 3 if magic == b"P6" else 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * chans
    if len(buf) - start < count * dt.itemsize:
        raise FormatError(f"{path}: raster data is truncated")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=start).astype(np.int64)
    if arr.size and arr.max() > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    return arr.reshape((h, w, 3) if chans == 3 else (h, w))


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), path)


def encode_pnm(arr) -> bytes:
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot store an array of shape {a.shape} as PGM/PPM")
    if a.size and (a.min() < 0 or a.max() > 65535):
        raise FormatError("samples must lie in 0..65535")
    maxval = 255 if not a.size or a.max() <= 255 else 65535
    dt = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    head = b"%s\n%d %d\n%d\n" % (magic, a.shape[1], a.shape[0], maxval)
    return head + np.ascontiguousarray(a, dtype=dt).tobytes()


def write_pnm(path, arr) -> None:
    Path(path).write_bytes(encode_pnm(arr))


def image_to_float(arr: np.ndarray) -> np.ndarray:
    """Raster samples to an H x W x 3 float image in [0, 1]."""
    a = np.asarray(arr, dtype=np.float64) / 255.0
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    return a


def image_to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not files:
        raise FormatError(f"{d}: no .ppm or .pgm frames")
    return files


def read_frames(directory) -> list[np.ndarray]:
    return [image_to_float(read_pnm(p)) for p in list_frames(directory)]


def read_labels(path) -> np.ndarray:
    lab = read_pnm(path)
    if lab.ndim != 2:
        raise FormatError(f"{path}: label rasters must be grayscale PGM")
    return lab


def read_label_dir(directory) -> list[np.ndarray]:
    return [read_labels(p) for p in list_frames(directory)]


# ---------------------------------------------------------------------------
# key=value records


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    return str(v)


def dumps_record(rec: dict) -> str:
    lines = []
    for k, v in rec.items():
        if "=" in str(k) or "\n" in str(k):
            raise FormatError(f"invalid record key {k!r}")
        text = format_value(v)
        if "\n" in text:
            raise FormatError(f"record value for {k!r} spans lines")
        lines.append(f"{k}={text}")
    return "\n".join(lines) + "\n"


def loads_record(text: str, path="<text>") -> dict[str, str]:
    rec = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        rec[k] = v
    return rec


def write_record(path, rec: dict) -> None:
    Path(path).write_text(dumps_record(rec))


def read_record(path) -> dict[str, str]:
    return loads_record(Path(path).read_text(), path)


# ---------------------------------------------------------------------------
# checkpoints

_NAME = re.compile(r"^[A-Za-z0-9_.]+$")


def save_checkpoint(directory, config_record: dict, params: dict[str, Tensor]) -> None:
    """One .aott file per parameter, a manifest listing them, and config.txt."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for k in names:
        if not _NAME.match(k):
            raise FormatError(f"parameter name {k!r} is not file-safe")
        (d / f"{k}.aott").write_bytes(encode_tensor(params[k]))
    (d / "manifest.txt").write_text("\n".join(names) + "\n")
    write_record(d / "config.txt", config_record)


def load_checkpoint(directory) -> tuple[dict[str, str], dict[str, Tensor]]:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.is_file():
        raise FormatError(f"{d}: missing manifest.txt")
    params = {}
    for name in manifest.read_text().split():
        f = d / f"{name}.aott"
        if not f.is_file():
            raise FormatError(f"{f}: listed in the manifest but missing")
        try:
            params[name] = decode_tensor(f.read_bytes())
        except ValueError as exc:
            raise FormatError(f"{f}: {exc}") from None
    cfg = read_record(d / "config.txt") if (d / "config.txt").is_file() else {}
    return cfg, params
