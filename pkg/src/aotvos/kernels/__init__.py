"""Hot kernels: compiled loops when the extension is built, numpy otherwise.

The backend is picked once at import. ``AOT_PURE_PYTHON=1`` forces the numpy
fallback. :func:`use` swaps backends at runtime (tests and benchmarks).
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _numpy

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

_BACKENDS: dict[str, ModuleType] = {"numpy": _numpy}
if _native is not None:
    _BACKENDS["native"] = _native

_active: ModuleType = _numpy
if _native is not None and os.environ.get("AOT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    _active = _native


def available() -> list[str]:
    return list(_BACKENDS)


def backend() -> str:
    return _active.NAME


def get(name: str) -> ModuleType:
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available; have {available()}") from None


def use(name: str) -> str:
    """Activate backend ``name``; returns the previously active one."""
    global _active
    prev = _active.NAME
    _active = get(name)
    return prev


def dwconv5_forward(x, w, b):
    return _active.dwconv5_forward(x, w, b)


def dwconv5_backward(g, x, w):
    return _active.dwconv5_backward(g, x, w)


def window_attn_forward(q, k, v, rel, h, w, lam, scale):
    return _active.window_attn_forward(q, k, v, rel, h, w, lam, scale)


def window_attn_backward(g, q, k, v, attn, h, w, lam, scale):
    return _active.window_attn_backward(g, q, k, v, attn, h, w, lam, scale)


def patch_embed_forward(ids, bank):
    return _active.patch_embed_forward(ids, bank)


def patch_embed_backward(g, ids, bank_shape):
    return _active.patch_embed_backward(g, ids, bank_shape)
