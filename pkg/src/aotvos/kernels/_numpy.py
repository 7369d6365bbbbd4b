"""Vectorised numpy kernels; the reference backend and the import-time fallback."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

NAME = "numpy"


def dwconv5_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, wd, _ = x.shape
    xp = np.pad(x, ((2, 2), (2, 2), (0, 0)))
    out = np.broadcast_to(b, x.shape).copy()
    for i in range(5):
        for j in range(5):
            out += xp[i:i + h, j:j + wd, :] * w[i, j]
    return out


def dwconv5_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    h, wd, _ = x.shape
    xp = np.pad(x, ((2, 2), (2, 2), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for i in range(5):
        for j in range(5):
            gxp[i:i + h, j:j + wd, :] += g * w[i, j]
            gw[i, j] = (xp[i:i + h, j:j + wd, :] * g).sum(axis=(0, 1))
    return gxp[2:2 + h, 2:2 + wd, :], gw, g.sum(axis=(0, 1))


@lru_cache(maxsize=64)
def window_index(h: int, w: int, lam: int):
    """Source position and validity for every (query, window cell) pair.

    Returns ``(src, valid)`` of shape (h*w, lam*lam); invalid cells point at 0.
    """
    r = (lam - 1) // 2
    rows = np.arange(h)[:, None, None, None] + np.arange(lam)[None, None, :, None] - r
    cols = np.arange(w)[None, :, None, None] + np.arange(lam)[None, None, None, :] - r
    rows, cols = np.broadcast_arrays(rows, cols)
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    src = np.where(valid, rows * w + cols, 0)
    src = src.reshape(h * w, lam * lam)
    valid = valid.reshape(h * w, lam * lam)
    src.flags.writeable = False
    valid.flags.writeable = False
    return src, valid


def window_attn_forward(q, k, v, rel, h, w, lam, scale):
    """Neighbourhood attention.

    q: heads x HW x d; k: heads x n x HW x d; v: heads x n x HW x dv;
    rel: heads x lam x lam. Returns (out heads x HW x dv, attn heads x HW x n x lam*lam).
    """
    src, valid = window_index(h, w, lam)
    kg = k[:, :, src]  # heads, n, HW, L2, d
    vg = v[:, :, src]
    logits = np.einsum("hpd,hnpjd->hpnj", q, kg) * scale
    logits += rel.reshape(rel.shape[0], 1, 1, -1)
    mask = valid[None, :, None, :]
    logits = np.where(mask, logits, -np.inf)
    m = logits.max(axis=(2, 3), keepdims=True)
    e = np.where(mask, np.exp(logits - m), 0.0)
    attn = (e / e.sum(axis=(2, 3), keepdims=True)).astype(q.dtype, copy=False)
    out = np.einsum("hpnj,hnpjd->hpd", attn, vg)
    return out, attn


def window_attn_backward(g, q, k, v, attn, h, w, lam, scale):
    src, valid = window_index(h, w, lam)
    heads, n, hw, _ = k.shape
    kg = k[:, :, src]
    vg = v[:, :, src]
    dattn = np.einsum("hpd,hnpjd->hpnj", g, vg)
    dlogit = attn * (dattn - (dattn * attn).sum(axis=(2, 3), keepdims=True))
    dq = np.einsum("hpnj,hnpjd->hpd", dlogit, kg) * scale
    dkg = np.einsum("hpnj,hpd->hnpjd", dlogit, q) * scale
    dvg = np.einsum("hpnj,hpd->hnpjd", attn, g)
    flat = src.reshape(-1)
    keep = valid.reshape(-1)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for hh in range(heads):
        for f in range(n):
            np.add.at(dk[hh, f], flat[keep], dkg[hh, f].reshape(hw * lam * lam, -1)[keep])
            np.add.at(dv[hh, f], flat[keep], dvg[hh, f].reshape(hw * lam * lam, -1)[keep])
    drel = dlogit.sum(axis=(1, 2)).reshape(heads, lam, lam)
    return dq, dk, dv, drel


def patch_embed_forward(ids: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Sum of per-position sub-identities over each P x P patch.

    ids: H x W identity index per pixel; bank: M x P x P x C.
    """
    p = bank.shape[1]
    hq, wq = ids.shape[0] // p, ids.shape[1] // p
    blocks = ids.reshape(hq, p, wq, p).transpose(0, 2, 1, 3)
    u = np.arange(p)[:, None]
    v = np.arange(p)[None, :]
    return bank[blocks, u, v].sum(axis=(2, 3))


def patch_embed_backward(g: np.ndarray, ids: np.ndarray, bank_shape: tuple) -> np.ndarray:
    m, p, _, c = bank_shape
    hq, wq = ids.shape[0] // p, ids.shape[1] // p
    blocks = ids.reshape(hq, p, wq, p).transpose(0, 2, 1, 3)
    flat_idx = (blocks * p * p + (np.arange(p)[:, None] * p + np.arange(p)[None, :])).reshape(-1)
    vals = np.broadcast_to(g[:, :, None, None, :], (hq, wq, p, p, c)).reshape(-1, c)
    out = np.zeros((m * p * p, c), dtype=g.dtype)
    np.add.at(out, flat_idx, vals)
    return out.reshape(bank_shape)
