"""Attention read-outs: propagating memory masks through captured attention maps."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .ident import PATCH, one_hot, pad_labels


def patch_fractions(labels, n_objects: int, patch: int = PATCH) -> np.ndarray:
    """Share of every patch covered by each object: (H/P * W/P) x N, rows sum to 1."""
    lab = pad_labels(np.asarray(labels).astype(np.int64), patch)
    h, w = lab.shape
    oh = one_hot(lab, n_objects).reshape(h // patch, patch, w // patch, patch, n_objects)
    return oh.mean(axis=(1, 3)).reshape(-1, n_objects)


def propagate(attn: np.ndarray, memory_fractions: np.ndarray) -> np.ndarray:
    """Attention-weighted memory masks, averaged over heads: HW x N.

    ``attn`` is dense (heads x HW x S); ``memory_fractions`` is S x N.
    """
    if attn.ndim != 3 or attn.shape[2] != memory_fractions.shape[0]:
        raise DimensionError(f"attention {attn.shape} does not match memory {memory_fractions.shape}")
    return np.einsum("hqs,sn->qn", attn.astype(np.float64), memory_fractions) / attn.shape[0]


def mass_in_region(propagated: np.ndarray, query_fractions: np.ndarray, obj: int) -> float:
    """Mean attention mass object ``obj``'s query tokens place on that object's memory tokens.

    Queries are weighted by how much of their patch belongs to ``obj``.
    """
    wq = query_fractions[:, obj]
    total = wq.sum()
    if total == 0:
        return float("nan")
    return float((wq * propagated[:, obj]).sum() / total)
