import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from aotvos import tensor as T
from aotvos.errors import ContractError, DimensionError, NumericError, TapeError
from aotvos.tensor import Tape, Tensor, backward, finite_diff_grad

from oracles import (conv2d_loops, dwconv_loops, gelu_exact, gradient_errors, layer_norm_exact,
                     matmul_loops, softmax_exact)


def t(x, dtype=None):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_selector():
    b = t([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(t(np.eye(2)), b).data, [[1, 2], [3, 4]])
    out = T.matmul(t([[1, 0], [0, 0]]), t([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_against_triple_loop(rng):
    for _ in range(25):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        ref = matmul_loops(a, b)
        got = T.matmul(t(a), t(b)).data
        assert np.all(np.abs(got - ref) <= 1e-6 * (1 + np.abs(ref)))


def test_matmul_single_precision_close_to_loops(rng):
    a = rng.normal(size=(5, 7)).astype(np.float32)
    b = rng.normal(size=(7, 3)).astype(np.float32)
    ref = matmul_loops(a, b)
    got = T.matmul(Tensor(a), Tensor(b)).data
    assert got.dtype == np.float32
    assert np.all(np.abs(got - ref) <= 1e-6 * (1 + np.abs(ref)) * 10)


def test_matmul_errors():
    with pytest.raises(DimensionError):
        T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    with pytest.raises(ContractError):
        T.matmul(t(np.ones((2, 2))), Tensor(np.ones((2, 2)), dtype="single"))


# -- softmax -----------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_lastdim(t([0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)
    big = T.softmax_lastdim(t([1000.0, 0.0])).data
    assert abs(big[0] - 1) <= 1e-12 and abs(big[1]) <= 1e-12
    np.testing.assert_allclose(T.softmax_lastdim(t([1, 2, 3])).data, softmax_exact([1, 2, 3]), rtol=1e-14)


def test_softmax_empty_dim():
    with pytest.raises(DimensionError):
        T.softmax_lastdim(t(np.zeros((3, 0))))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    d = T.softmax_lastdim(t(x)).data
    assert np.all(d >= 0)
    assert np.all(np.abs(d.sum(axis=-1) - 1) <= 1e-12)
    s = T.softmax_lastdim(Tensor(x, dtype="single")).data
    assert np.all(np.abs(s.sum(axis=-1, dtype=np.float64) - 1) <= 1e-6)


# -- layer norm --------------------------------------------------------------

def test_layer_norm_examples(rng):
    one, zero = t(np.ones(4)), t(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(t([5, 5, 5, 5]), one, zero).data, np.zeros(4))
    out = T.layer_norm(t([1, -1]), t([1, 1]), t([0, 0]), eps=1e-14).data
    np.testing.assert_allclose(out, [1, -1], atol=1e-12)
    for _ in range(20):
        x = rng.normal(size=6) * 3 + 1
        g, b = rng.normal(size=6), rng.normal(size=6)
        ref = layer_norm_exact(x, g, b, 1e-5)
        np.testing.assert_allclose(T.layer_norm(t(x), t(g), t(b), 1e-5).data, ref, atol=1e-6)


def test_layer_norm_errors():
    with pytest.raises(DimensionError):
        T.layer_norm(t(np.ones((2, 3))), t(np.ones(4)), t(np.zeros(4)))
    with pytest.raises(ContractError):
        T.layer_norm(t(np.ones(3)), t(np.ones(3)), t(np.zeros(3)), eps=0)


# -- gelu --------------------------------------------------------------------

def test_gelu_examples():
    assert T.gelu(t([0.0])).data[0] == 0.0
    hi, lo = T.gelu(t([12.0, -12.0])).data
    assert abs(hi - 12.0) < 1e-12 and abs(lo) < 1e-12
    assert abs(T.gelu(t([1.0])).data[0] - gelu_exact(1.0)) < 1e-15


def test_gelu_is_not_the_tanh_form():
    x = 1.5
    tanh_form = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    exact = T.gelu(t([x])).data[0]
    assert abs(exact - gelu_exact(x)) < 1e-15
    assert abs(exact - tanh_form) > 1e-5


# -- depthwise conv ----------------------------------------------------------

def test_dwconv_delta_kernel_is_identity(rng):
    x = rng.normal(size=(6, 5, 3))
    w = np.zeros((5, 5, 3))
    w[2, 2, :] = 1
    out = T.depthwise_conv2d_5x5(t(x), t(w), t(np.zeros(3))).data
    np.testing.assert_array_equal(out, x)


def test_dwconv_counts_25_terms():
    x = np.full((7, 7, 1), 2.0)
    out = T.depthwise_conv2d_5x5(t(x), t(np.ones((5, 5, 1))), t([0.5])).data
    assert out[3, 3, 0] == 25 * 2.0 + 0.5
    assert out[0, 0, 0] == 9 * 2.0 + 0.5


def test_dwconv_against_loops(rng):
    for _ in range(5):
        x = rng.normal(size=(7, 7, 2))
        w = rng.normal(size=(5, 5, 2))
        b = rng.normal(size=2)
        ref = dwconv_loops(x, w, b)
        got = T.depthwise_conv2d_5x5(t(x), t(w), t(b)).data
        assert np.all(np.abs(got - ref) <= 1e-6 * (1 + np.abs(ref)))


def test_dwconv_channels_never_mix(rng):
    x = rng.normal(size=(5, 5, 3))
    x2 = x.copy()
    x2[..., 1] += 10
    w, b = t(rng.normal(size=(5, 5, 3))), t(np.zeros(3))
    a = T.depthwise_conv2d_5x5(t(x), w, b).data
    c = T.depthwise_conv2d_5x5(t(x2), w, b).data
    np.testing.assert_array_equal(a[..., [0, 2]], c[..., [0, 2]])


def test_dwconv_bad_kernel():
    with pytest.raises(DimensionError):
        T.depthwise_conv2d_5x5(t(np.ones((4, 4, 2))), t(np.ones((3, 3, 2))), t(np.zeros(2)))


def test_conv2d_against_loops(rng):
    for stride, pad, k in ((1, 0, 1), (1, 1, 3), (2, 1, 4), (2, 0, 3)):
        x = rng.normal(size=(8, 6, 3))
        w = rng.normal(size=(k, k, 3, 2))
        b = rng.normal(size=2)
        ref = conv2d_loops(x, w, b, stride, pad)
        got = T.conv2d(t(x), t(w), t(b), stride=stride, padding=pad).data
        assert np.all(np.abs(got - ref) <= 1e-6 * (1 + np.abs(ref)))


# -- backward ----------------------------------------------------------------

def test_backward_identity_chain():
    tape = Tape()
    x = tape.watch(t(3.0))
    g = backward(tape, x)
    assert g[x] == 1.0


def test_backward_bilinear(rng):
    a0, b0 = rng.normal(size=4), rng.normal(size=4)
    tape = Tape()
    a, b = tape.watch(t(a0)), tape.watch(t(b0))
    g = backward(tape, T.tsum(T.mul(a, b)))
    np.testing.assert_array_equal(g[a], b0)
    np.testing.assert_array_equal(g[b], a0)


def test_backward_contract_errors():
    tape = Tape()
    x = tape.watch(t([1.0, 2.0]))
    with pytest.raises(ContractError):
        backward(tape, T.mul(x, 2.0))
    with pytest.raises(TapeError):
        backward(tape, t(1.0))
    with pytest.raises(TapeError):
        backward(Tape(), T.tsum(x))


def test_backward_visits_in_reverse_creation_order():
    tape = Tape()
    x = tape.watch(t(1.0))
    seen = []

    def op(name, src):
        return T.record(name, src.data * 1.0, (src,), lambda g, name=name: (seen.append(name), (g,))[1])

    a = op("a", x)
    b = op("b", a)
    c = op("c", x)
    loss = T.add(b, c)
    backward(tape, loss)
    assert seen == ["c", "b", "a"]


def test_unreached_leaf_has_zero_gradient():
    tape = Tape()
    x, y = tape.watch(t([1.0, 2.0])), tape.watch(t([3.0]))
    g = backward(tape, T.tsum(x))
    np.testing.assert_array_equal(g[y], [0.0])


def test_nonfinite_results_are_errors():
    with pytest.raises(NumericError):
        T.exp(t([1000.0]))
    with pytest.raises(NumericError):
        T.log(t([0.0]))
    with pytest.raises(NumericError):
        T.div(t([1.0]), t([0.0]))


def test_tensors_are_immutable():
    x = t([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0
    with pytest.raises(AttributeError):
        x.shape = (1, 2)


# -- finite differences ------------------------------------------------------

def test_finite_diff_quadratic_and_linear():
    g = finite_diff_grad(lambda x: T.tsum(T.mul(x, x)), t([3.0]), 1e-5)
    assert abs(g[0] - 6.0) <= 1e-6
    slope = np.array([2.5, -1.25, 0.5])
    g = finite_diff_grad(lambda x: T.tsum(T.mul(x, t(slope))), t([0.1, 0.2, 0.3]), 1e-3)
    np.testing.assert_allclose(g, slope, rtol=1e-10)


def test_finite_diff_errors():
    with pytest.raises(ContractError):
        finite_diff_grad(lambda x: T.tsum(x), t([1.0]), 0.0)
    with pytest.raises(NumericError):
        finite_diff_grad(lambda x: float("nan"), t([1.0]))


# -- gradient suite: every differentiable primitive, 20 random instances each --

def _shape_ops():
    r = np.random.default_rng
    return {
        "add": (lambda a, b: T.add(a, b), lambda g: [g.normal(size=(3, 4)), g.normal(size=(4,))]),
        "sub": (lambda a, b: T.sub(a, b), lambda g: [g.normal(size=(3, 1)), g.normal(size=(3, 4))]),
        "mul": (lambda a, b: T.mul(a, b), lambda g: [g.normal(size=(2, 3)), g.normal(size=(2, 3))]),
        "div": (lambda a, b: T.div(a, b), lambda g: [g.normal(size=(2, 3)), g.uniform(0.5, 2, size=(2, 3))]),
        "neg": (lambda a: T.neg(a), lambda g: [g.normal(size=(3,))]),
        "exp": (lambda a: T.exp(a), lambda g: [g.normal(size=(3, 2))]),
        "log": (lambda a: T.log(a), lambda g: [g.uniform(0.5, 3, size=(4,))]),
        "maximum": (lambda a, b: T.maximum(a, b), lambda g: [g.normal(size=(5,)), g.normal(size=(5,))]),
        "minimum": (lambda a, b: T.minimum(a, b), lambda g: [g.normal(size=(5,)), g.normal(size=(5,))]),
        "reshape": (lambda a: T.reshape(a, (3, 2)), lambda g: [g.normal(size=(2, 3))]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), lambda g: [g.normal(size=(2, 3, 2))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), lambda g: [g.normal(size=(2, 2)), g.normal(size=(2, 3))]),
        "take": (lambda a: T.take(a, [2, 0, 2], axis=1), lambda g: [g.normal(size=(2, 3))]),
        "sum": (lambda a: T.tsum(a, axis=0), lambda g: [g.normal(size=(3, 2))]),
        "mean": (lambda a: T.mean(a, axis=1, keepdims=True), lambda g: [g.normal(size=(3, 2))]),
        "matmul": (lambda a, b: T.matmul(a, b), lambda g: [g.normal(size=(3, 4)), g.normal(size=(4, 2))]),
        "batched_matmul": (lambda a, b: T.matmul(a, b), lambda g: [g.normal(size=(2, 3, 4)), g.normal(size=(4, 2))]),
        "softmax": (lambda a: T.softmax_lastdim(a), lambda g: [g.normal(size=(3, 4)) * 2]),
        "layer_norm": (lambda a, w, b: T.layer_norm(a, w, b),
                       lambda g: [g.normal(size=(3, 5)), g.normal(size=5), g.normal(size=5)]),
        "gelu": (lambda a: T.gelu(a), lambda g: [g.normal(size=(6,)) * 2]),
        "dwconv5": (lambda x, w, b: T.depthwise_conv2d_5x5(x, w, b),
                    lambda g: [g.normal(size=(4, 3, 2)), g.normal(size=(5, 5, 2)), g.normal(size=2)]),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
                   lambda g: [g.normal(size=(4, 4, 2)), g.normal(size=(4, 4, 2, 2)), g.normal(size=2)]),
        "upsample_nearest": (lambda a: T.upsample_nearest(a, 2), lambda g: [g.normal(size=(2, 3, 2))]),
        "subpixel": (lambda x, w, b: T.subpixel_upsample(x, w, b),
                     lambda g: [g.normal(size=(2, 2, 3)), g.normal(size=(3, 2, 2, 2)), g.normal(size=2)]),
        "resize_bilinear": (lambda a: T.resize_bilinear(a, 8, 6), lambda g: [g.normal(size=(2, 3, 2))]),
    }


OPS = _shape_ops()


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_differences(name):
    fn, make = OPS[name]
    worst = 0.0
    for trial in range(20):
        arrays = make(np.random.default_rng(trial))
        worst = max(worst, *gradient_errors(fn, arrays, seed=trial))
    assert worst <= 1e-3, f"{name}: relative error {worst:.2e}"


# -- determinism and file format ---------------------------------------------

def test_ops_are_bit_deterministic(rng):
    x = rng.normal(size=(6, 6, 4))
    w, b = rng.normal(size=(5, 5, 4)), rng.normal(size=4)
    a = T.depthwise_conv2d_5x5(t(x), t(w), t(b)).data
    c = T.depthwise_conv2d_5x5(t(x), t(w), t(b)).data
    assert a.tobytes() == c.tobytes()
    m = rng.normal(size=(9, 9))
    assert T.softmax_lastdim(T.matmul(t(m), t(m))).data.tobytes() == \
        T.softmax_lastdim(T.matmul(t(m), t(m))).data.tobytes()


@pytest.mark.parametrize("dtype,code", [("single", 0), ("double", 1)])
def test_tensor_file_layout(tmp_path, dtype, code):
    x = Tensor(np.arange(6).reshape(2, 3), dtype=dtype)
    buf = T.encode_tensor(x)
    assert buf[:4] == b"AOTT" and buf[4] == 1 and buf[5] == code and buf[6] == 2
    assert int.from_bytes(buf[7:11], "little") == 2 and int.from_bytes(buf[11:15], "little") == 3
    T.save_tensor(tmp_path / "x.aott", x)
    y = T.load_tensor(tmp_path / "x.aott")
    assert y.dtype == x.dtype and y.data.tobytes() == x.data.tobytes()


def test_tensor_file_rejects_garbage():
    with pytest.raises(ContractError):
        T.decode_tensor(b"NOPE1234")
    buf = T.encode_tensor(Tensor(np.ones(3)))
    with pytest.raises(ContractError):
        T.decode_tensor(buf[:-1])
