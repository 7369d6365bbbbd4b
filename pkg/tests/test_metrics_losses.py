import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from aotvos.errors import ConfigError, DimensionError
from aotvos.losses import LossConfig, bootstrapped_ce, pixel_ce, segmentation_loss, soft_jaccard
from aotvos.metrics import boundary_f, boundary_map, frame_scores, region_j, sequence_scores
from aotvos.tensor import Tensor

from oracles import gradient_errors, iou_count


def square(top, left, size=4, shape=(10, 10), value=1):
    m = np.zeros(shape, dtype=int)
    m[top:top + size, left:left + size] = value
    return m


# -- region J ----------------------------------------------------------------

def test_region_j_examples():
    a = square(2, 2)
    assert region_j(a, a, 1) == 1.0
    assert region_j(square(0, 0), square(6, 6), 1) == 0.0
    assert region_j(square(2, 1), square(2, 3), 1) == pytest.approx(1 / 3, abs=1e-15)
    assert region_j(np.zeros((4, 4)), np.zeros((4, 4)), 1) == 1.0
    with pytest.raises(DimensionError):
        region_j(np.zeros((4, 4)), np.zeros((4, 5)), 1)


@given(arrays(np.int8, (6, 7), elements=st.integers(0, 3)), arrays(np.int8, (6, 7), elements=st.integers(0, 3)))
def test_region_j_matches_counting_oracle(p, g):
    for i in range(4):
        assert region_j(p, g, i) == pytest.approx(iou_count(p, g, i), abs=1e-15)


@given(arrays(np.int8, (6, 7), elements=st.integers(0, 3)), arrays(np.int8, (6, 7), elements=st.integers(0, 3)),
       st.permutations([1, 2, 3]))
def test_scores_are_permutation_invariant(p, g, perm):
    lut = np.array([0] + list(perm))
    a = frame_scores(p, g, 4)
    b = frame_scores(lut[p], lut[g], 4)
    assert a == pytest.approx(b, abs=1e-15)


# -- boundary F ----------------------------------------------------------------

def test_boundary_map_of_square():
    b = boundary_map(square(2, 2, 4) == 1)
    assert b.sum() == 12
    assert not b[3:5, 3:5].any()


def test_boundary_f_examples():
    a = square(2, 2)
    assert boundary_f(a, a, 1) == 1.0
    # a straight-edged shift by exactly the tolerance matches every boundary pixel
    assert boundary_f(square(2, 3), square(2, 2), 1, tol=1) == 1.0
    assert boundary_f(square(3, 2), square(2, 2), 1, tol=2) == 1.0
    assert boundary_f(np.zeros((5, 5)), np.zeros((5, 5)), 1) == 1.0
    assert boundary_f(np.zeros((10, 10)), a, 1) == 0.0
    with pytest.raises(ValueError):
        boundary_f(a, a, 1, tol=-1)


def test_boundary_f_hand_counted():
    # gt: 4x4 square at rows 2-5, cols 1-4; pred shifted right by tol + 2 = 3.
    # Each boundary has 12 pixels. Within one pixel of the other boundary are
    # its shared column (4 pixels) and the two row pixels next to it, so P = R = 6/12.
    gt = square(2, 1)
    pred = square(2, 4)
    assert boundary_f(pred, gt, 1, tol=1) == pytest.approx(0.5, abs=1e-15)
    # with no tolerance only the shared column matches: P = R = 4/12
    assert boundary_f(pred, gt, 1, tol=0) == pytest.approx(1 / 3, abs=1e-15)


def test_sequence_scores():
    gts = [square(2, 1), square(2, 2)]
    preds = [square(2, 1), square(2, 4)]
    s = sequence_scores(preds, gts, 2)
    assert s["J"] == pytest.approx(0.5 * (1 + region_j(preds[1], gts[1], 1)))
    assert s["JF"] == pytest.approx(0.5 * (s["J"] + s["F"]))
    with pytest.raises(DimensionError):
        sequence_scores(preds, gts[:1], 2)


# -- losses ------------------------------------------------------------------

def _probs_from_losses(losses):
    p = np.exp(-np.asarray(losses, dtype=np.float64))
    return Tensor(np.stack([p, 1 - p], axis=-1)), np.zeros(len(losses), dtype=int)


def test_bootstrap_hand_example():
    prob, gt = _probs_from_losses([2.0, 1.0, 1.0, 0.0])
    assert bootstrapped_ce(prob, gt, 0.5).item() == pytest.approx(1.5, abs=1e-12)
    assert bootstrapped_ce(prob, gt, 0.25).item() == pytest.approx(2.0, abs=1e-12)
    assert bootstrapped_ce(prob, gt, 1.0).item() == pytest.approx(1.0, abs=1e-12)


def test_bootstrap_edge_cases():
    one_hot = Tensor(np.eye(3)[[0, 1, 2, 1]])
    assert bootstrapped_ce(one_hot, [0, 1, 2, 1]).item() == pytest.approx(0.0, abs=1e-12)
    zero = Tensor(np.array([[0.0, 1.0]]))
    assert bootstrapped_ce(zero, [0]).item() == pytest.approx(-math.log(1e-12))
    with pytest.raises(ConfigError):
        bootstrapped_ce(zero, [0], 0.0)
    with pytest.raises(DimensionError):
        pixel_ce(zero, [0, 1])


@given(arrays(np.float64, (12, 3), elements=st.floats(0.05, 1.0)), st.integers(0, 2 ** 16))
def test_bootstrap_full_ratio_is_mean_ce(w, seed):
    prob = w / w.sum(axis=1, keepdims=True)
    gt = np.random.default_rng(seed).integers(0, 3, size=12)
    ce = -np.log(prob[np.arange(12), gt]).mean()
    assert abs(bootstrapped_ce(Tensor(prob), gt, 1.0).item() - ce) <= 1e-12


def test_soft_jaccard_examples():
    gt = np.array([0, 1, 1, 2, 0, 0])
    assert soft_jaccard(Tensor(np.eye(3)[gt]), gt).item() == pytest.approx(0.0, abs=1e-15)
    n, p = 3, gt.size
    uni = Tensor(np.full((p, n), 1.0 / n))
    counts = np.bincount(gt, minlength=n)
    closed = 1 - np.mean([(c / n) / (c + (p - c) / n) for c in counts])
    assert soft_jaccard(uni, gt).item() == pytest.approx(closed, abs=1e-15)


def test_soft_jaccard_absent_object_costs_nothing():
    gt = np.array([0, 0, 1, 1])
    prob = np.eye(3)[gt]
    assert soft_jaccard(Tensor(prob), gt).item() == pytest.approx(0.0, abs=1e-15)


@given(arrays(np.int8, (5, 5), elements=st.integers(0, 2)), arrays(np.int8, (5, 5), elements=st.integers(0, 2)))
def test_soft_jaccard_on_one_hot_is_one_minus_j(pred, gt):
    val = soft_jaccard(Tensor(np.eye(3)[pred.reshape(-1)]), gt.reshape(-1)).item()
    js = [region_j(pred, gt, i) if ((pred == i) | (gt == i)).any() else 1.0 for i in range(3)]
    assert val == pytest.approx(1 - np.mean(js), abs=1e-15)
    assert 0.0 <= val <= 1.0


def test_segmentation_loss_weights():
    prob, gt = _probs_from_losses([0.3, 1.2])
    cfg = LossConfig()
    expect = 0.5 * bootstrapped_ce(prob, gt, 0.25).item() + 0.5 * soft_jaccard(prob, gt).item()
    assert segmentation_loss(prob, gt, cfg).item() == pytest.approx(expect, abs=1e-15)
    with pytest.raises(ConfigError):
        LossConfig(ce_weight=0.7)
    with pytest.raises(ConfigError):
        LossConfig(bootstrap_ratio=1.5)


@pytest.mark.parametrize("loss", ["bootstrap", "jaccard"])
def test_loss_gradients(loss):
    from aotvos.tensor import softmax_lastdim
    gt = np.array([0, 2, 1, 1, 0, 2])

    def fn(z):
        p = softmax_lastdim(z)
        return bootstrapped_ce(p, gt, 0.5) if loss == "bootstrap" else soft_jaccard(p, gt)

    rng = np.random.default_rng(3)
    worst = max(max(gradient_errors(fn, [rng.normal(size=(6, 3))], seed=s)) for s in range(20))
    assert worst <= 1e-3
