# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for the three hot kernels.

Same signatures and semantics as ``_numpy``. Every reduction runs in a fixed
ascending index order, so results are reproducible run to run.
"""
import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport exp, INFINITY

NAME = "native"


cdef inline object _dt(const floating x):
    if floating is float:
        return np.float32
    return np.float64


def dwconv5_forward(const floating[:, :, ::1] x, const floating[:, :, ::1] w, const floating[::1] b):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    out_arr = np.empty((H, W, C), dtype=_dt(x[0, 0, 0]))
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t r, c, ch, i, j, rr, cc
    cdef floating acc
    for r in range(H):
        for c in range(W):
            for ch in range(C):
                acc = b[ch]
                for i in range(5):
                    rr = r + i - 2
                    if rr < 0 or rr >= H:
                        continue
                    for j in range(5):
                        cc = c + j - 2
                        if cc < 0 or cc >= W:
                            continue
                        acc = acc + x[rr, cc, ch] * w[i, j, ch]
                out[r, c, ch] = acc
    return out_arr


def dwconv5_backward(const floating[:, :, ::1] g, const floating[:, :, ::1] x, const floating[:, :, ::1] w):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    dt = _dt(x[0, 0, 0])
    gx_arr = np.zeros((H, W, C), dtype=dt)
    gw_arr = np.zeros((5, 5, C), dtype=dt)
    gb_arr = np.zeros(C, dtype=dt)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef floating[:, :, ::1] gw = gw_arr
    cdef floating[::1] gb = gb_arr
    cdef Py_ssize_t r, c, ch, i, j, rr, cc
    cdef floating gv
    for r in range(H):
        for c in range(W):
            for ch in range(C):
                gv = g[r, c, ch]
                gb[ch] += gv
                for i in range(5):
                    rr = r + i - 2
                    if rr < 0 or rr >= H:
                        continue
                    for j in range(5):
                        cc = c + j - 2
                        if cc < 0 or cc >= W:
                            continue
                        gx[rr, cc, ch] += gv * w[i, j, ch]
                        gw[i, j, ch] += gv * x[rr, cc, ch]
    return gx_arr, gw_arr, gb_arr


def window_attn_forward(const floating[:, :, ::1] q, const floating[:, :, :, ::1] k, const floating[:, :, :, ::1] v,
                        const floating[:, :, ::1] rel, int h, int w, int lam, double scale):
    cdef Py_ssize_t heads = q.shape[0], P = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t n = k.shape[1], DV = v.shape[3]
    cdef Py_ssize_t L2 = lam * lam
    cdef int R = (lam - 1) // 2
    dt = _dt(q[0, 0, 0])
    out_arr = np.zeros((heads, P, DV), dtype=dt)
    attn_arr = np.zeros((heads, P, n, L2), dtype=dt)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, :, :, ::1] attn = attn_arr
    cdef Py_ssize_t hh, p, f, a, bb, d, src, j
    cdef int r0, c0, rr, cc
    cdef double s, mx, tot, wgt
    for hh in range(heads):
        for p in range(P):
            r0 = p // w
            c0 = p % w
            mx = -INFINITY
            for f in range(n):
                for a in range(lam):
                    rr = r0 + a - R
                    if rr < 0 or rr >= h:
                        continue
                    for bb in range(lam):
                        cc = c0 + bb - R
                        if cc < 0 or cc >= w:
                            continue
                        src = rr * w + cc
                        s = 0.0
                        for d in range(D):
                            s += q[hh, p, d] * k[hh, f, src, d]
                        s = s * scale + rel[hh, a, bb]
                        attn[hh, p, f, a * lam + bb] = <floating>s
                        if s > mx:
                            mx = s
            tot = 0.0
            for f in range(n):
                for a in range(lam):
                    rr = r0 + a - R
                    if rr < 0 or rr >= h:
                        continue
                    for bb in range(lam):
                        cc = c0 + bb - R
                        if cc < 0 or cc >= w:
                            continue
                        j = a * lam + bb
                        s = exp(attn[hh, p, f, j] - mx)
                        attn[hh, p, f, j] = <floating>s
                        tot += s
            for f in range(n):
                for a in range(lam):
                    rr = r0 + a - R
                    if rr < 0 or rr >= h:
                        continue
                    for bb in range(lam):
                        cc = c0 + bb - R
                        if cc < 0 or cc >= w:
                            continue
                        j = a * lam + bb
                        wgt = attn[hh, p, f, j] / tot
                        attn[hh, p, f, j] = <floating>wgt
                        src = rr * w + cc
                        for d in range(DV):
                            out[hh, p, d] += <floating>(wgt * v[hh, f, src, d])
    return out_arr, attn_arr


def window_attn_backward(const floating[:, :, ::1] g, const floating[:, :, ::1] q, const floating[:, :, :, ::1] k,
                         const floating[:, :, :, ::1] v, const floating[:, :, :, ::1] attn,
                         int h, int w, int lam, double scale):
    cdef Py_ssize_t heads = q.shape[0], P = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t n = k.shape[1], DV = v.shape[3]
    cdef Py_ssize_t L2 = lam * lam
    cdef int R = (lam - 1) // 2
    dt = _dt(q[0, 0, 0])
    dq_arr = np.zeros((heads, P, D), dtype=dt)
    dk_arr = np.zeros((heads, n, P, D), dtype=dt)
    dv_arr = np.zeros((heads, n, P, DV), dtype=dt)
    drel_arr = np.zeros((heads, lam, lam), dtype=dt)
    datt_arr = np.zeros((n, L2), dtype=np.float64)
    cdef floating[:, :, ::1] dq = dq_arr
    cdef floating[:, :, :, ::1] dk = dk_arr
    cdef floating[:, :, :, ::1] dv = dv_arr
    cdef floating[:, :, ::1] drel = drel_arr
    cdef double[:, ::1] datt = datt_arr
    cdef Py_ssize_t hh, p, f, a, bb, d, src, j
    cdef int r0, c0, rr, cc
    cdef double s, dot, wgt, dl
    for hh in range(heads):
        for p in range(P):
            r0 = p // w
            c0 = p % w
            dot = 0.0
            for f in range(n):
                for a in range(lam):
                    rr = r0 + a - R
                    if rr < 0 or rr >= h:
                        continue
                    for bb in range(lam):
                        cc = c0 + bb - R
                        if cc < 0 or cc >= w:
                            continue
                        j = a * lam + bb
                        src = rr * w + cc
                        s = 0.0
                        for d in range(DV):
                            s += g[hh, p, d] * v[hh, f, src, d]
                        datt[f, j] = s
                        dot += s * attn[hh, p, f, j]
            for f in range(n):
                for a in range(lam):
                    rr = r0 + a - R
                    if rr < 0 or rr >= h:
                        continue
                    for bb in range(lam):
                        cc = c0 + bb - R
                        if cc < 0 or cc >= w:
                            continue
                        j = a * lam + bb
                        src = rr * w + cc
                        wgt = attn[hh, p, f, j]
                        dl = wgt * (datt[f, j] - dot)
                        drel[hh, a, bb] += <floating>dl
                        dl = dl * scale
                        for d in range(D):
                            dq[hh, p, d] += <floating>(dl * k[hh, f, src, d])
                            dk[hh, f, src, d] += <floating>(dl * q[hh, p, d])
                        for d in range(DV):
                            dv[hh, f, src, d] += <floating>(wgt * g[hh, p, d])
    return dq_arr, dk_arr, dv_arr, drel_arr


def _patch_forward(const long[:, ::1] ids, const floating[:, :, :, ::1] bank):
    cdef Py_ssize_t Pp = bank.shape[1], C = bank.shape[3]
    cdef Py_ssize_t hq = ids.shape[0] // Pp, wq = ids.shape[1] // Pp
    out_arr = np.zeros((hq, wq, C), dtype=_dt(bank[0, 0, 0, 0]))
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, u, vv, ch
    cdef long ident
    for i in range(hq):
        for j in range(wq):
            for u in range(Pp):
                for vv in range(Pp):
                    ident = ids[i * Pp + u, j * Pp + vv]
                    for ch in range(C):
                        out[i, j, ch] += bank[ident, u, vv, ch]
    return out_arr


def _patch_backward(const floating[:, :, ::1] g, const long[:, ::1] ids, floating[:, :, :, ::1] dbank):
    cdef Py_ssize_t Pp = dbank.shape[1], C = dbank.shape[3]
    cdef Py_ssize_t hq = ids.shape[0] // Pp, wq = ids.shape[1] // Pp
    cdef Py_ssize_t i, j, u, vv, ch
    cdef long ident
    for i in range(hq):
        for j in range(wq):
            for u in range(Pp):
                for vv in range(Pp):
                    ident = ids[i * Pp + u, j * Pp + vv]
                    for ch in range(C):
                        dbank[ident, u, vv, ch] += g[i, j, ch]


def patch_embed_forward(ids, bank):
    return _patch_forward(np.ascontiguousarray(ids, dtype=np.int_), bank)


def patch_embed_backward(g, ids, bank_shape):
    dbank = np.zeros(bank_shape, dtype=g.dtype)
    _patch_backward(g, np.ascontiguousarray(ids, dtype=np.int_), dbank)
    return dbank
