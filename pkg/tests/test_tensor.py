import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmlite.checks import GRADCHECK_CASES, run_gradcheck
from mmlite.errors import ContractError, DimensionError, NumericError, TapeError, UnsupportedKernelError
from mmlite.tensor import Tape, Tensor, backward, count_macs, grad_check, ops


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --- naive oracles ---------------------------------------------------------

def naive_linear(x, W, b):
    out = np.zeros(x.shape[:-1] + (W.shape[0],))
    for idx in np.ndindex(*x.shape[:-1]):
        for o in range(W.shape[0]):
            acc = 0.0 if b is None else b[o]
            for i in range(W.shape[1]):
                acc += x[idx + (i,)] * W[o, i]
            out[idx + (o,)] = acc
    return out


def naive_depthwise(x, k, stride, pad):
    B, C, H, W = x.shape
    _, kh, kw = k.shape
    ph, pw = (kh // 2, kw // 2) if pad == "same" else (0, 0)
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    out = np.zeros((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            y, z = i * stride + u - ph, j * stride + v - pw
                            if 0 <= y < H and 0 <= z < W:
                                acc += x[b, c, y, z] * k[c, u, v]
                    out[b, c, i, j] = acc
    return out


def naive_conv(x, Wt):
    B, C, H, W = x.shape
    Co, _, kh, kw = Wt.shape
    out = np.zeros((B, Co, H, W))
    for o in range(Co):
        for c in range(C):
            out[:, o] += naive_depthwise(x[:, c:c + 1], Wt[o, c][None], 1, "same")[:, 0]
    return out


# --- Tensor and tape ----------------------------------------------------------

def test_tensor_rejects_non_finite_and_bad_dtype():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ContractError):
        Tensor(np.zeros(3, dtype=np.int32), dtype=np.int32)


def test_tensor_defaults_to_f32_and_keeps_f64():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    t = Tensor(np.zeros((2, 3)))
    assert t.size == int(np.prod(t.shape)) == t.data.size


def test_backward_sum_and_square():
    x = T([1.0, 2.0, 3.0], True)
    with Tape() as tape:
        loss = ops.sum(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x], [1, 1, 1])
    y = T([2.0], True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(y, y))
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad, [4.0])
    assert y.grad.shape == y.shape and y.grad.dtype == y.dtype


def test_backward_accumulates_two_paths():
    rng = np.random.default_rng(0)
    x = T(rng.normal(size=4), True)
    with Tape() as tape:
        loss = ops.add(ops.sum(ops.silu(x)), ops.sum(ops.exp(x)))
    tape.backward(loss)
    both = x.grad.copy()
    parts = []
    for f in (ops.silu, ops.exp):
        with Tape() as tape:
            loss = ops.sum(f(x))
        tape.backward(loss)
        parts.append(x.grad.copy())
    np.testing.assert_allclose(both, parts[0] + parts[1], atol=1e-14)


def test_tape_errors():
    x = T([1.0, 2.0], True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(TapeError):
        tape.backward(y)
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)
    with pytest.raises(TapeError):
        with tape:
            pass


def test_no_recording_outside_tape():
    x = T([1.0], True)
    y = ops.scale(x, 3.0)
    assert not y.requires_grad


def test_tape_entries_topological():
    rng = np.random.default_rng(1)
    x = T(rng.normal(size=(2, 3)), True)
    W = T(rng.normal(size=(4, 3)), True)
    with Tape() as tape:
        y = ops.silu(ops.linear(x, W))
        ops.sum(y)
    produced = set()
    for e in tape.entries:
        for t in e.inputs:
            assert id(t) in produced or t is x or t is W or not t.requires_grad
        produced.add(id(e.output))


# --- forward ops ----------------------------------------------------------------

def test_linear_examples():
    np.testing.assert_array_equal(ops.linear(T([1, 2]), T([[1, 0], [0, 1]])).data, [1, 2])
    np.testing.assert_array_equal(ops.linear(T([1, 1]), T([[2, 3]]), T([1])).data, [6])


def test_linear_matches_loop(rng):
    x, W, b = rng.normal(size=(3, 7)), rng.normal(size=(5, 7)), rng.normal(size=5)
    np.testing.assert_allclose(ops.linear(T(x), T(W), T(b)).data, naive_linear(x, W, b), atol=1e-12)
    y32 = ops.linear(Tensor(x.astype(np.float32)), Tensor(W.astype(np.float32)), Tensor(b.astype(np.float32)))
    np.testing.assert_allclose(y32.data, naive_linear(x, W, b), atol=1e-5)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[4, 5\]"):
        ops.linear(T(np.zeros((2, 3))), T(np.zeros((4, 5))))


def test_depthwise_examples():
    y = ops.depthwise_conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 3, 3))))
    assert y.data[0, 0, 1, 1] == 9
    delta = np.zeros((2, 3, 3))
    delta[:, 1, 1] = 1
    x = np.random.default_rng(0).normal(size=(1, 2, 4, 5))
    np.testing.assert_array_equal(ops.depthwise_conv2d(T(x), T(delta)).data, x)
    with pytest.raises(UnsupportedKernelError):
        ops.depthwise_conv2d(T(x), T(np.ones((2, 2, 3))))


@pytest.mark.parametrize("shape,stride,pad", [((3, 3), 1, "same"), ((3, 1), 1, "same"), ((1, 3), 1, "same"),
                                              ((3, 3), 2, "same"), ((3, 1), 2, "valid")])
def test_depthwise_matches_loop(rng, shape, stride, pad):
    x, k, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2,) + shape), rng.normal(size=2)
    got = ops.depthwise_conv2d(T(x), T(k), stride, pad, T(b)).data
    np.testing.assert_allclose(got, naive_depthwise(x, k, stride, pad) + b[None, :, None, None], atol=1e-12)


def test_conv2d_matches_loop(rng):
    x, W = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 3, 3))
    np.testing.assert_allclose(ops.conv2d(T(x), T(W)).data, naive_conv(x, W), atol=1e-12)


def test_pointwise_examples(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(ops.pointwise_conv2d(T(x), T(np.eye(3))).data, x)
    y = ops.pointwise_conv2d(T(x[:, :2]), T([[1.0, 1.0]])).data
    np.testing.assert_allclose(y[:, 0], x[:, 0] + x[:, 1])
    W = rng.normal(size=(5, 3))
    ref = naive_linear(np.moveaxis(x, 1, -1), W, None)
    np.testing.assert_allclose(ops.pointwise_conv2d(T(x), T(W)).data, np.moveaxis(ref, -1, 1), atol=1e-12)
    with pytest.raises(DimensionError):
        ops.pointwise_conv2d(T(x), T(np.ones((2, 2))))


def test_layer_norm_examples(rng):
    one, zero = T(np.ones(3)), T(np.zeros(3))
    np.testing.assert_array_equal(ops.layer_norm(T([1, 1, 1]), one, zero).data, [0, 0, 0])
    np.testing.assert_allclose(ops.layer_norm(T([-1, 1]), T([1, 1]), T([0, 0]), 1e-12).data, [-1, 1], atol=1e-9)
    y = ops.layer_norm(T(rng.normal(size=(4, 8)) * 3 + 1), T(np.ones(8)), T(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)


def test_silu_examples():
    np.testing.assert_allclose(ops.silu(T([0.0, 1.0, 40.0])).data, [0.0, 1 / (1 + math.exp(-1)), 40.0],
                               rtol=1e-12)


def test_softmax_examples(rng):
    np.testing.assert_array_equal(ops.softmax(T([0.0, 0.0])).data, [0.5, 0.5])
    y = ops.softmax(T([1000.0, 0.0])).data
    assert np.isclose(y[0], 1) and y[1] < 1e-300
    assert abs(ops.softmax(T(rng.normal(size=5))).data.sum() - 1) < 1e-12


def test_cross_entropy_value(rng):
    z = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 1])
    ref = -np.mean([z[i, l] - np.log(np.exp(z[i]).sum()) for i, l in enumerate(labels)])
    assert abs(ops.cross_entropy(T(z), labels).item() - ref) < 1e-12


def test_elementwise_requires_same_shape():
    with pytest.raises(DimensionError):
        ops.add(T([1.0, 2.0]), T([1.0]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_op_overflow_is_numeric_error():
    with pytest.raises(NumericError):
        ops.exp(T([1000.0]))


def test_mac_counter(rng):
    with count_macs() as c:
        ops.pointwise_conv2d(T(rng.normal(size=(1, 2, 4, 4))), T(rng.normal(size=(3, 2))))
    assert 2 * c.total == 192


# --- gradient checking -------------------------------------------------------

@pytest.mark.parametrize("name", list(GRADCHECK_CASES))
def test_gradcheck_cases(name):
    rep, tol = run_gradcheck(name)
    assert rep.passed, f"{name}: {rep}"
    assert rep.max_rel_err <= tol


def test_grad_check_examples(rng):
    rep = grad_check(lambda x, W: ops.linear(x, W), [T(rng.normal(size=(3, 4))), T(rng.normal(size=(5, 4)))])
    assert rep.passed and rep.max_rel_err <= 1e-6
    assert grad_check(ops.silu, [T([0.5])]).passed


def test_grad_check_reports_wrong_gradient():
    from mmlite.tensor import apply

    def bad(x):
        return apply("bad", x.data ** 2, (x,), lambda g: (g * 3.0,))

    rep = grad_check(bad, [T([1.0, 2.0])])
    assert not rep.passed and rep.max_rel_err > 0.1


def test_grad_check_contract():
    with pytest.raises(ContractError):
        grad_check(ops.silu, [Tensor([1.0])])
    with pytest.raises(ContractError):
        grad_check(ops.silu, [T([1.0])], eps=1e-2)


# --- properties ----------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, width=64)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    y = ops.softmax(T(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)), elements=st.floats(-10, 10)))
def test_layer_norm_moments(x):
    spread = x.var(axis=-1)
    D = x.shape[-1]
    y = ops.layer_norm(T(x), T(np.ones(D)), T(np.zeros(D))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-6)
    big = spread > 1e-2
    np.testing.assert_allclose(y.var(axis=-1)[big], 1, atol=1e-3)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_linear_oracle_property(n, din, dout, seed):
    r = np.random.default_rng(seed)
    x, W, b = r.normal(size=(n, din)), r.normal(size=(dout, din)), r.normal(size=dout)
    np.testing.assert_allclose(ops.linear(T(x), T(W), T(b)).data, naive_linear(x, W, b), atol=1e-12)


@given(st.integers(1, 2), st.integers(1, 3), st.integers(2, 6), st.integers(2, 6),
       st.sampled_from([(3, 3), (3, 1), (1, 3)]), st.sampled_from([1, 2]), st.integers(0, 2**31 - 1))
def test_depthwise_oracle_property(B, C, H, W, ks, stride, seed):
    r = np.random.default_rng(seed)
    x, k = r.normal(size=(B, C, H, W)), r.normal(size=(C,) + ks)
    got = ops.depthwise_conv2d(T(x), T(k), stride, "same").data
    np.testing.assert_allclose(got, naive_depthwise(x, k, stride, "same"), atol=1e-12)


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-20, 20)))
def test_silu_bounds(x):
    y = ops.silu(T(x)).data
    assert np.all(y >= -0.279)  # global minimum of x*sigmoid(x)
    assert np.all(np.abs(y) <= np.abs(x) + 1e-12)
