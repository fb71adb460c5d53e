import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sapool import tensor as T
from sapool.errors import ContractError, DimensionError, NumericError
from sapool.gradcheck import check_gradients, relative_error, run_op_suite
from sapool.rng import RngState

from conftest import leaf


def naive_conv(x, w, b, stride, pad):
    """Loop-based cross-correlation used as an independent oracle."""
    B, C, H, W = x.shape
    Co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def bilinear_oracle(src, h, w):
    hs, ws = src.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            y = min(max((i + 0.5) * hs / h - 0.5, 0), hs - 1)
            x = min(max((j + 0.5) * ws / w - 0.5, 0), ws - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, hs - 1), min(x0 + 1, ws - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (
                src[y0, x0] * (1 - dy) * (1 - dx)
                + src[y0, x1] * (1 - dy) * dx
                + src[y1, x0] * dy * (1 - dx)
                + src[y1, x1] * dy * dx
            )
    return out


# -- matmul ------------------------------------------------------------------


def test_matmul_identity(f64):
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), a).data, a.data)


def test_matmul_dot_product(f64):
    assert T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


def test_matmul_grad_is_broadcast_row_sums(f64, rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5)))
    T.tsum(T.matmul(a, b)).backward()
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    assert np.allclose(a.grad, expected, atol=1e-12)
    (r,) = check_gradients(lambda: T.matmul(a, b), {"a": a})
    assert r.max_rel_err < 1e-6


# -- conv2d ------------------------------------------------------------------


def test_conv_unit_kernel_is_identity(f64, rng):
    x = rng.normal(size=(2, 1, 5, 5))
    y = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor([0.0]))
    assert np.array_equal(y.data, x)


def test_conv_sum_kernel(f64):
    y = T.conv2d(T.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), T.Tensor(np.ones((1, 1, 2, 2))), None, stride=2)
    assert y.data.tolist() == [[[[10.0]]]]


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (3, 2, 2), (1, 1, 1), (2, 0, 1)])
def test_conv_matches_loop_oracle(f64, rng, stride, pad, k):
    x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad).data
    assert np.allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv_gradients_stride2(f64, rng):
    x, w, b = leaf(rng.normal(size=(1, 2, 6, 6))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
    for r in check_gradients(lambda: T.conv2d(x, w, b, 2, 1), {"x": x, "w": w, "b": b}):
        assert r.max_rel_err < 1e-6, r


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        T.conv2d(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 3, 3)))


def test_depthwise_matches_grouped_oracle(f64, rng):
    x, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(3, 1, 3, 3))
    got = T.depthwise_conv2d(T.Tensor(x), T.Tensor(w), None, 2, 1).data
    for c in range(3):
        ref = naive_conv(x[:, c : c + 1], w[c : c + 1], None, 2, 1)
        assert np.allclose(got[:, c : c + 1], ref, atol=1e-12)


# -- softmax and pointwise ---------------------------------------------------


def test_softmax_examples(f64):
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    big = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [1.0, 0.0])
    assert np.allclose(T.softmax(T.Tensor(np.log([1.0, 2.0, 3.0]))).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(x, c):
    with T.precision("f64"):
        s = T.softmax(T.Tensor(x)).data
        assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)
        assert np.allclose(T.softmax(T.Tensor(x + c)).data, s, atol=1e-6)


def test_pointwise_examples(f64):
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5
    assert T.relu(T.Tensor(-3.0)).item() == 0.0
    assert T.relu(T.Tensor(3.0)).item() == 3.0
    # at |x| = 50 the sigmoid is within 2e-22 of its limit, so the result is
    # the correctly rounded endpoint; the strict interior holds for |x| <= 30
    v = T.exp(T.sigmoid(T.Tensor([-50.0, 0.0, 50.0]))).data
    oracle = [math.exp(1.0 / (1.0 + math.exp(-x))) for x in (-50.0, 0.0, 50.0)]
    assert v.tolist() == oracle
    assert np.all(v >= 1.0) and np.all(v <= math.e)
    inner = T.exp(T.sigmoid(T.Tensor([-30.0, 0.0, 30.0]))).data
    assert np.all(inner > 1.0) and np.all(inner < math.e)


@given(arrays(np.float64, 7, elements=st.floats(-30, 30)))
def test_exp_sigmoid_range(x):
    with T.precision("f64"):
        v = T.exp(T.sigmoid(T.Tensor(x))).data
    assert np.all(v > 1.0) and np.all(v < math.e)


# -- normalisation -------------------------------------------------------------


def test_batchnorm_two_values(f64):
    x = T.Tensor(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))
    rm, rv = np.zeros(1), np.ones(1)
    y = T.batchnorm2d(x, T.Tensor([1.0]), T.Tensor([0.0]), rm, rv, training=True)
    expected = np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5)
    assert np.allclose(y.data.ravel(), expected, atol=1e-15)
    # momentum 0.1, unbiased variance 2
    assert np.allclose(rm, [0.0]) and np.allclose(rv, [0.9 + 0.1 * 2.0])


def test_batchnorm_constant_channel_gives_beta(f64):
    x = T.Tensor(np.full((2, 1, 2, 2), 3.0))
    y = T.batchnorm2d(x, T.Tensor([2.0]), T.Tensor([0.7]), np.zeros(1), np.ones(1), training=True)
    assert np.allclose(y.data, 0.7)


def test_batchnorm_eval_is_affine(f64, rng):
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    g, b = T.Tensor(rng.normal(size=3)), T.Tensor(rng.normal(size=3))
    x1, x2 = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
    f = lambda x: T.batchnorm2d(T.Tensor(x), g, b, rm.copy(), rv.copy(), training=False).data
    # affine: f(a x1 + (1-a) x2) = a f(x1) + (1-a) f(x2)
    assert np.allclose(f(0.3 * x1 + 0.7 * x2), 0.3 * f(x1) + 0.7 * f(x2), atol=1e-12)


def test_batchnorm_empty_channel():
    with pytest.raises(DimensionError):
        T.batchnorm2d(T.zeros((0, 2, 3, 3)), T.ones(2), T.zeros(2), np.zeros(2), np.ones(2), True)


def test_layernorm_examples(f64):
    g, b = T.Tensor([1.0, 1.0, 1.0]), T.Tensor([0.0, 0.0, 0.0])
    assert np.allclose(T.layernorm(T.Tensor([[2.0, 2.0, 2.0]]), g, b).data, 0.0)
    g2, b2 = T.Tensor([2.0, 3.0]), T.Tensor([0.5, -1.0])
    got = T.layernorm(T.Tensor([[-1.0, 1.0]]), g2, b2).data
    s = 1 / math.sqrt(1 + 1e-5)
    assert np.allclose(got, [[-s * 2 + 0.5, s * 3 - 1.0]], atol=1e-15)


def test_layernorm_gradient(f64, rng):
    x, g, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    for r in check_gradients(lambda: T.layernorm(x, g, b), {"x": x, "g": g, "b": b}):
        assert r.max_rel_err < 1e-6, r


# -- bilinear ------------------------------------------------------------------


def test_bilinear_constant_extension(f64):
    assert np.allclose(T.bilinear_upsample(T.Tensor(np.full((1, 1, 1, 1), 2.5)), (3, 5)).data, 2.5)


def test_bilinear_corners_preserved(f64):
    src = np.array([[0.0, 1.0], [2.0, 3.0]])
    up = T.bilinear_upsample(T.Tensor(src[None, None]), (4, 4)).data[0, 0]
    assert [up[0, 0], up[0, -1], up[-1, 0], up[-1, -1]] == [0.0, 1.0, 2.0, 3.0]
    assert np.allclose(up, bilinear_oracle(src, 4, 4), atol=1e-15)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 6), st.integers(0, 6))
def test_bilinear_matches_oracle(hs, ws, dh, dw):
    src = np.random.default_rng(hs * 7 + ws).normal(size=(hs, ws))
    with T.precision("f64"):
        got = T.bilinear_upsample(T.Tensor(src[None, None]), (hs + dh, ws + dw)).data[0, 0]
    assert np.allclose(got, bilinear_oracle(src, hs + dh, ws + dw), atol=1e-12)


def test_bilinear_constant_map_stays_constant(f64):
    assert np.allclose(T.bilinear_upsample(T.Tensor(np.full((1, 2, 3, 2), -4.0)), (7, 9)).data, -4.0)


def test_bilinear_rejects_downsampling():
    with pytest.raises(DimensionError):
        T.bilinear_upsample(T.zeros((1, 1, 4, 4)), (2, 4))


# -- backward semantics --------------------------------------------------------


def test_backward_sum_and_square(f64, rng):
    x = leaf(rng.normal(size=(3, 2)))
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))
    x.grad = None
    T.tsum(x * x).backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_fan_out_accumulates(f64, rng):
    x = leaf(rng.normal(size=4))
    T.tsum(x + x).backward()
    assert np.array_equal(x.grad, np.full(4, 2.0))


def test_sigmoid_matmul_composite(f64, rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    for r in check_gradients(lambda: T.sigmoid(T.matmul(a, b)), {"a": a, "b": b}):
        assert r.max_rel_err < 1e-6


def test_backward_needs_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_tape_is_topological_and_visits_once(f64, rng):
    x = leaf(rng.normal(size=3))
    y = T.exp(x)
    z = T.tsum(y * y + y)
    tape = T.Tape.from_root(z)
    pos = {id(t): i for i, t in enumerate(tape.nodes)}
    for t in tape.nodes:
        if t._node is not None:
            assert all(pos[id(p)] < pos[id(t)] for p in t._node.parents if p.requires_grad)
    visited = []
    T.backward(z, visit=lambda t: visited.append(id(t)))
    assert len(visited) == len(set(visited)) == len(tape)


# -- precision, debug, rng -----------------------------------------------------


def test_precision_context():
    assert T.zeros((1,)).dtype == np.float32
    with T.precision("f64"):
        assert T.zeros((1,)).dtype == np.float64
    with pytest.raises(ContractError):
        T.set_precision("f16")


def test_debug_mode_flags_overflow():
    with T.debug_mode():
        with pytest.raises(NumericError):
            T.exp(T.Tensor([1000.0]))
    assert np.isinf(T.exp(T.Tensor([1000.0])).data[0])


def test_rng_same_state_same_stream():
    a = RngState(42, 7).generator().normal(size=5)
    b = RngState(42, 7).generator().normal(size=5)
    assert np.array_equal(a, b)
    s = RngState(42)
    first, second = s.next().normal(size=3), s.next().normal(size=3)
    assert not np.array_equal(first, second)
    assert np.array_equal(RngState(1).fork(3).generator().random(3), RngState(1).fork(3).generator().random(3))


def test_relative_error_formula():
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert relative_error(np.array([1.1]), np.array([1.0])) == pytest.approx(0.1 / (1 + 1e-8))


def test_op_suite_all_pass():
    results = run_op_suite()
    assert len(results) > 100
    bad = [r for r in results if not r.passed]
    assert not bad, bad
