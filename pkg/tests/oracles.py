"""Slow, obviously-correct reference implementations used only by the tests."""
from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def softmax_exact(row):
    row = [float(v) for v in row]
    top = max(row)
    e = [math.exp(v - top) for v in row]
    total = math.fsum(e)
    return np.array([v / total for v in e])


def layer_norm_exact(vec, gain, bias, eps):
    vec = [float(v) for v in vec]
    mu = math.fsum(vec) / len(vec)
    var = math.fsum((v - mu) ** 2 for v in vec) / len(vec)
    inv = 1.0 / math.sqrt(var + eps)
    return np.array([(v - mu) * inv * g + b for v, g, b in zip(vec, gain, bias)])


def gelu_exact(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def dwconv_loops(x, w, b):
    h, wd, c = x.shape
    k = w.shape[0]
    r = k // 2
    out = np.zeros((h, wd, c))
    for i in range(h):
        for j in range(wd):
            for ch in range(c):
                s = float(b[ch])
                for u in range(k):
                    for v in range(k):
                        y, z = i + u - r, j + v - r
                        if 0 <= y < h and 0 <= z < wd:
                            s += x[y, z, ch] * w[u, v, ch]
                out[i, j, ch] = s
    return out


def conv2d_loops(x, w, b, stride=1, padding=0):
    h, wd, cin = x.shape
    k, cout = w.shape[0], w.shape[3]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                s = float(b[o])
                for u in range(k):
                    for v in range(k):
                        y, z = i * stride + u - padding, j * stride + v - padding
                        if 0 <= y < h and 0 <= z < wd:
                            for ch in range(cin):
                                s += x[y, z, ch] * w[u, v, ch, o]
                out[i, j, o] = s
    return out


def attention_loops(q, k, v, bias=None):
    """softmax(q k^T / sqrt(d) + bias) v, one query row at a time; -inf bias masks."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = []
        keep = []
        for j in range(k.shape[0]):
            bij = 0.0 if bias is None else float(bias[i][j])
            if bij == -math.inf:
                continue
            logits.append(math.fsum(q[i] * k[j]) / math.sqrt(d) + bij)
            keep.append(j)
        w = softmax_exact(logits)
        out[i] = sum(wj * v[j] for wj, j in zip(w, keep))
    return out


def window_attention_loops(xt, xn, en, lam, rel, wk, wv, wo, heads):
    """Short-term attention straight from its definition: per location, per head,
    softmax over the n*lam*lam window cells that fall inside the frame."""
    h, w, c = xt.shape
    n = xn.shape[0]
    d = c // heads
    r = (lam - 1) // 2
    q = xt.reshape(h * w, c) @ wk
    k = xn.reshape(n, h * w, c) @ wk
    v = xn.reshape(n, h * w, c) @ wv + en.reshape(n, h * w, c)
    out = np.zeros((h * w, c))
    for p in range(h * w):
        pr, pc = divmod(p, w)
        for hd in range(heads):
            sl = slice(hd * d, (hd + 1) * d)
            logits, vals = [], []
            for f in range(n):
                for a in range(lam):
                    for b in range(lam):
                        y, z = pr + a - r, pc + b - r
                        if 0 <= y < h and 0 <= z < w:
                            m = y * w + z
                            logits.append(float(q[p, sl] @ k[f, m, sl]) / math.sqrt(d) + rel[hd, a, b])
                            vals.append(v[f, m, sl])
            wts = softmax_exact(logits)
            out[p, sl] = sum(wt * val for wt, val in zip(wts, vals))
    return (out @ wo).reshape(h, w, -1)


def gather_softmax(logits, sigma):
    logits = np.asarray(logits, dtype=np.float64)
    return np.stack([softmax_exact([row[s] for s in sigma]) for row in logits])


def patch_embed_loops(labels, bank, sigma, patch=16):
    h, w = labels.shape
    c = bank.shape[3]
    out = np.zeros(((h // patch) * (w // patch), c))
    for y in range(h):
        for x in range(w):
            q = (y // patch) * (w // patch) + x // patch
            out[q] += bank[sigma[labels[y, x]], y % patch, x % patch]
    return out


def iou_count(pred, gt, obj):
    inter = union = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        a, b = p == obj, g == obj
        inter += a and b
        union += a or b
    return 1.0 if union == 0 else inter / union


def relative_error(analytic, numeric, floor=1e-10):
    """Norm of the difference over the larger norm; ``floor`` keeps exact zeros
    from dividing finite-difference round-off by nothing."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def gradient_errors(fn, arrays, seed=0, h=1e-5):
    """Relative error of the tape gradient of sum(fn(*xs) * R) against central differences, per input."""
    from aotvos.tensor import Tape, Tensor, backward, finite_diff_grad, mul, tsum

    xs = [Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]
    probe = fn(*xs)
    weights = Tensor(np.random.default_rng(seed).normal(size=probe.shape))

    def scalar(*ts):
        return tsum(mul(fn(*ts), weights))

    tape = Tape()
    watched = [tape.watch(x) for x in xs]
    grads = backward(tape, scalar(*watched))
    errs = []
    for i, x in enumerate(xs):
        def f(xi, i=i):
            args = list(xs)
            args[i] = xi
            return scalar(*args)
        errs.append(relative_error(grads[watched[i]], finite_diff_grad(f, x, h)))
    return errs
