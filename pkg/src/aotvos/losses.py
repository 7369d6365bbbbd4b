"""Segmentation losses on probability tensors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .ident import one_hot
from .tensor import Tensor, add, div, log, maximum, mean, minimum, mul, neg, reshape, take, tsum


@dataclass(frozen=True)
class LossConfig:
    ce_weight: float = 0.5
    jaccard_weight: float = 0.5
    bootstrap_ratio: float = 0.25

    def __post_init__(self):
        if abs(self.ce_weight + self.jaccard_weight - 1.0) > 1e-12:
            raise ConfigError("loss weights must sum to 1")
        if not 0.0 < self.bootstrap_ratio <= 1.0:
            raise ConfigError("bootstrap ratio must lie in (0, 1]")


def _flatten(prob: Tensor) -> Tensor:
    n = prob.shape[-1]
    return reshape(prob, (prob.size // n, n))


def pixel_ce(prob: Tensor, gt_labels) -> Tensor:
    """-log of the ground-truth class probability per pixel, clamped at 1e-12."""
    flat = _flatten(prob)
    p, n = flat.shape
    gt = np.asarray(gt_labels).reshape(-1).astype(np.intp)
    if gt.size != p:
        raise DimensionError(f"{gt.size} labels for {p} pixels")
    picked = take(reshape(flat, (p * n,)), np.arange(p) * n + gt, axis=0)
    return neg(log(maximum(picked, 1e-12)))


def bootstrapped_ce(prob: Tensor, gt_labels, ratio: float = 1.0) -> Tensor:
    """Mean cross-entropy over the ceil(ratio * P) hardest pixels."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError("bootstrap ratio must lie in (0, 1]")
    losses = pixel_ce(prob, gt_labels)
    k = math.ceil(ratio * losses.size)
    if k >= losses.size:
        return mean(losses)
    hardest = np.argsort(-losses.data, kind="stable")[:k]
    return mean(take(losses, hardest, axis=0))


def soft_jaccard(prob: Tensor, gt) -> Tensor:
    """1 - mean over objects of sum(min(Y', gt)) / sum(max(Y', gt)).

    ``gt`` is a one-hot array or an integer raster. An object with an empty
    union contributes zero loss.
    """
    flat = _flatten(prob)
    p, n = flat.shape
    g = np.asarray(gt)
    if g.ndim == 2 and g.shape == (p, n) and g.dtype.kind == "f":
        onehot = g
    else:
        onehot = one_hot(g, n)
    if onehot.shape != (p, n):
        raise DimensionError(f"ground truth {onehot.shape} does not match {flat.shape}")
    target = Tensor(onehot, dtype=prob.dtype)
    inter = tsum(minimum(flat, target), axis=0)
    union = tsum(maximum(flat, target), axis=0)
    empty = union.data == 0
    if empty.any():
        union = add(union, Tensor(empty.astype(np.float64), dtype=prob.dtype))
        inter = add(inter, Tensor(empty.astype(np.float64), dtype=prob.dtype))
    return add(1.0, neg(mean(div(inter, union))))


def segmentation_loss(prob: Tensor, gt_labels, cfg: LossConfig, ratio: float | None = None) -> Tensor:
    r = cfg.bootstrap_ratio if ratio is None else ratio
    ce = bootstrapped_ce(prob, gt_labels, r)
    jac = soft_jaccard(prob, gt_labels)
    return add(mul(ce, cfg.ce_weight), mul(jac, cfg.jaccard_weight))
