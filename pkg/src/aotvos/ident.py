"""Identity assignment, embedding and decoding for many objects at once.

Every object slot (background is slot 0) receives a distinct vector from a
shared identity bank; the embedded mask rides along with the attention values
and the decoder predicts one logit per bank identity, from which the assigned
ones are selected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, DimensionError, MaskError, NumericError
from .tensor import Tensor, record, resolve_dtype, softmax_lastdim, take
from . import kernels

PATCH = 16


@dataclass(frozen=True)
class Assignment:
    """Injective map from object slots to identity slots."""

    sigma: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.sigma)) != len(self.sigma):
            raise CapacityError(f"assignment reuses an identity: {self.sigma}")
        if any(s < 0 for s in self.sigma):
            raise ConfigError("identity indices must be non-negative")

    @property
    def n(self) -> int:
        return len(self.sigma)

    def indices(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=np.intp)

    def selector(self, m: int) -> np.ndarray:
        """The N x M row-selector matrix P with P @ P.T == I_N."""
        p = np.zeros((self.n, m))
        p[np.arange(self.n), self.indices()] = 1.0
        return p

    def dumps(self) -> str:
        return "sigma=" + ",".join(str(s) for s in self.sigma)

    @classmethod
    def loads(cls, text: str) -> "Assignment":
        key, _, value = text.strip().partition("=")
        if key != "sigma" or not value:
            raise ConfigError(f"malformed assignment record: {text!r}")
        return cls(tuple(int(v) for v in value.split(",")))


def sample_assignment(seed, n: int, m: int) -> Assignment:
    """Uniformly random injection of ``n`` object slots into ``m`` identities.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if n < 1:
        raise ConfigError("need at least one object slot")
    if n > m:
        raise CapacityError(f"{n} object slots but only {m} identities")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Assignment(tuple(int(i) for i in rng.choice(m, size=n, replace=False)))


@dataclass(frozen=True)
class IdentityBank:
    D: Tensor

    @property
    def m(self) -> int:
        return self.D.shape[0]

    @property
    def c(self) -> int:
        return self.D.shape[1]


@dataclass(frozen=True)
class PatchIdentityBank:
    Dp: Tensor

    @property
    def m(self) -> int:
        return self.Dp.shape[0]

    @property
    def patch(self) -> int:
        return self.Dp.shape[1]

    @property
    def c(self) -> int:
        return self.Dp.shape[3]

    def patch_sum(self) -> IdentityBank:
        """Identity vectors seen by a patch filled with one identity."""
        return IdentityBank(Tensor(self.Dp.data.sum(axis=(1, 2))))


def init_bank(m: int, c: int, seed=0, dtype=None) -> IdentityBank:
    if m < 2:
        raise ConfigError("identity bank needs M >= 2")
    rng = np.random.default_rng(seed)
    return IdentityBank(Tensor(rng.normal(0.0, 1.0 / np.sqrt(c), size=(m, c)), dtype=resolve_dtype(dtype)))


def patch_bank_array(rng: np.random.Generator, m: int, c: int, patch: int = PATCH,
                     jitter: float = 0.25) -> np.ndarray:
    """Random sub-identities: a shared per-identity vector spread over the patch plus cell noise.

    A patch filled with one identity sums to that identity's vector (unit
    variance per channel) plus noise of std ``jitter``.
    """
    cells = patch * patch
    shared = rng.normal(0.0, 1.0, size=(m, 1, 1, c)) / cells
    noise = rng.normal(0.0, jitter / patch, size=(m, patch, patch, c))
    return shared + noise


def init_patch_bank(m: int, c: int, seed=0, dtype=None, patch: int = PATCH) -> PatchIdentityBank:
    if m < 2:
        raise ConfigError("identity bank needs M >= 2")
    rng = np.random.default_rng(seed)
    return PatchIdentityBank(Tensor(patch_bank_array(rng, m, c, patch), dtype=resolve_dtype(dtype)))


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise MaskError(f"labels must lie in [0, {n}); got range [{labels.min()}, {labels.max()}]")
    return (labels.reshape(-1)[:, None] == np.arange(n)[None, :]).astype(np.float64)


def _labels_from(mask, n: int) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim == 2 and arr.shape[1] == n and arr.dtype.kind == "f":
        if not np.all((arr == 0) | (arr == 1)) or not np.all(arr.sum(axis=1) == 1):
            raise MaskError("one-hot mask rows must contain exactly one 1")
        return arr.argmax(axis=1)
    labels = arr.reshape(-1).astype(np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise MaskError(f"label out of range for {n} object slots")
    return labels


def id_embed(mask, bank: IdentityBank | Tensor, a: Assignment) -> Tensor:
    """E = Y P D as a row select: pixel p receives D[sigma(label(p))].

    ``mask`` is either an HW x N one-hot float array or an integer label raster.
    """
    D = bank.D if isinstance(bank, IdentityBank) else bank
    if max(a.sigma) >= D.shape[0]:
        raise CapacityError("assignment points past the end of the bank")
    labels = _labels_from(mask, a.n)
    return take(D, a.indices()[labels], axis=0)


def pad_labels(labels: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """Pad a label raster with background up to a multiple of ``patch``."""
    h, w = labels.shape
    ph, pw = (-h) % patch, (-w) % patch
    if not ph and not pw:
        return labels
    return np.pad(labels, ((0, ph), (0, pw)), constant_values=0)


def patch_id_embed(labels: np.ndarray, bank: PatchIdentityBank | Tensor, a: Assignment) -> Tensor:
    """Patch-summed identity embedding at 1/P resolution, flattened to (H/P * W/P) x C."""
    Dp = bank.Dp if isinstance(bank, PatchIdentityBank) else bank
    p = Dp.shape[1]
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError("labels must be an H x W raster")
    h, w = labels.shape
    if h % p or w % p:
        raise DimensionError(f"label raster {h}x{w} is not a multiple of the {p}x{p} patch")
    if labels.size and (labels.min() < 0 or labels.max() >= a.n):
        raise MaskError(f"label out of range for {a.n} object slots")
    if max(a.sigma) >= Dp.shape[0]:
        raise CapacityError("assignment points past the end of the bank")
    ids = np.ascontiguousarray(a.indices()[labels])
    out = kernels.patch_embed_forward(ids, Dp.data)
    shape = Dp.shape
    hq, wq = h // p, w // p
    return record("patch_embed", out.reshape(hq * wq, -1), (Dp,),
                  lambda g: (kernels.patch_embed_backward(
                      np.ascontiguousarray(g.reshape(hq, wq, -1)), ids, shape),))


def att_id(Q: Tensor, K: Tensor, V: Tensor, E: Tensor) -> Tensor:
    """Attention whose values carry the identity embedding: Att(Q, K, V + E)."""
    from .attn import scaled_dot_attention

    if K.shape[0] != V.shape[0] or V.shape != E.shape:
        raise DimensionError(f"memory extents differ: K {K.shape}, V {V.shape}, E {E.shape}")
    return scaled_dot_attention(Q, K, V + E)


def decode_select(LD: Tensor, a: Assignment) -> Tensor:
    """Softmax over the logits of the assigned identities only."""
    if max(a.sigma) >= LD.shape[-1]:
        raise CapacityError("assignment points past the logit channels")
    return softmax_lastdim(take(LD, a.indices(), axis=-1))


def cosine_matrix(bank) -> np.ndarray:
    """Pairwise cosine similarity between identity vectors (M x M)."""
    if isinstance(bank, PatchIdentityBank):
        bank = bank.patch_sum()
    if isinstance(bank, IdentityBank):
        bank = bank.D
    d = np.asarray(bank.data if isinstance(bank, Tensor) else bank, dtype=np.float64)
    norms = np.linalg.norm(d, axis=1)
    if np.any(norms == 0):
        raise NumericError("identity vector with zero norm")
    u = d / norms[:, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    cos = 0.5 * (cos + cos.T)
    np.fill_diagonal(cos, 1.0)
    return cos
