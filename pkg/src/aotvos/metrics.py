"""Region (J) and boundary (F) scores on integer label rasters."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DimensionError


def region_j(pred, gt, obj: int) -> float:
    """IoU of object ``obj``; 1 when it is absent from both rasters."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"raster sizes differ: {pred.shape} vs {gt.shape}")
    p = pred == obj
    g = gt == obj
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (image edge excluded)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, mode="edge")
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def boundary_f(pred, gt, obj: int, tol: int = 1) -> float:
    """F-measure of boundary pixels matched within a ``tol``-pixel disk."""
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"raster sizes differ: {pred.shape} vs {gt.shape}")
    pb = boundary_map(pred == obj)
    gb = boundary_map(gt == obj)
    n_p, n_g = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    if tol > 0:
        disk = _disk(tol)
        gd = ndimage.binary_dilation(gb, structure=disk)
        pd = ndimage.binary_dilation(pb, structure=disk)
    else:
        gd, pd = gb, pb
    precision = np.count_nonzero(pb & gd) / n_p
    recall = np.count_nonzero(gb & pd) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def frame_scores(pred, gt, n_objects: int, tol: int = 1) -> tuple[float, float]:
    """Mean J and F over foreground objects 1..N-1 of one frame."""
    objs = range(1, n_objects) if n_objects > 1 else range(0, 1)
    js = [region_j(pred, gt, i) for i in objs]
    fs = [boundary_f(pred, gt, i, tol) for i in objs]
    return float(np.mean(js)), float(np.mean(fs))


def sequence_scores(preds, gts, n_objects: int, tol: int = 1) -> dict[str, float]:
    """Summary J, F and J&F: per-frame means averaged over frames."""
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    per = [frame_scores(p, g, n_objects, tol) for p, g in zip(preds, gts)]
    j = float(np.mean([x[0] for x in per]))
    f = float(np.mean([x[1] for x in per]))
    return {"J": j, "F": f, "JF": 0.5 * (j + f)}
