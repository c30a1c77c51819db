import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from clkd import tensor as T
from clkd.errors import DimensionError, NonFiniteError, ParameterError, RankError
from clkd.tensor import Tensor


def check_grad(fn, *shapes, seed=0, lo=-2.0, hi=2.0, tol=1e-4):
    """Compare tape gradients of scalar fn(*tensors) with central differences for every input."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(lo, hi, s) for s in shapes]
    ts = [Tensor(x, requires_grad=True) for x in xs]
    T.backward(fn(*ts))
    for i, x in enumerate(xs):
        def f(v, i=i):
            args = [Tensor(v if j == i else xs[j]) for j in range(len(xs))]
            return fn(*args).item()
        num = oracles.fd_grad(f, x)
        assert oracles.rel_err(ts[i].grad, num) < tol, f"input {i}"


def test_matmul_hand_example_and_loop_oracle():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a, b), atol=1e-12)


def test_matmul_identity():
    m = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_is_ones_times_bt():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = np.arange(12.0).reshape(3, 4)
    T.backward(T.sum(T.matmul(a, Tensor(b))))
    np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.T)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-12)
    hot = T.softmax_rows(Tensor([[3.0, -1.0, 0.5]]), temperature=1e6).data
    np.testing.assert_allclose(hot, [[1 / 3] * 3], atol=1e-5)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ParameterError):
        T.softmax_rows(Tensor([[1.0, 2.0]]), tau)
    with pytest.raises(ParameterError):
        T.log_softmax_rows(Tensor([[1.0, 2.0]]), tau)


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])
    np.testing.assert_array_equal(T.l2_normalize_rows(Tensor([[0.0, 0.0]])).data, [[0.0, 0.0]])
    row = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_allclose(T.l2_normalize_rows(Tensor(7.5 * row)).data, T.l2_normalize_rows(Tensor(row)).data,
                               atol=1e-15)


def test_zero_row_gradient_is_finite():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.backward(T.sum(T.l2_normalize_rows(x)))
    assert np.all(np.isfinite(x.grad))


def test_transpose_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.transpose(m).data, [[1, 3], [2, 4]])
    np.testing.assert_array_equal(T.transpose(T.transpose(m)).data, m.data)
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    T.backward(T.sum(T.transpose(x)))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    with pytest.raises(RankError):
        T.transpose(Tensor(np.ones(3)))


def test_backward_examples():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.backward(T.scale(T.frobenius_norm_sq(x), 0.5))
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_rejects_non_scalar_and_clears_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(RankError):
        T.backward(T.scale(x, 2.0))
    T.get_tape().clear()
    T.backward(T.sum(x))
    assert len(T.get_tape().nodes) == 0


def test_grads_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(x))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_shared_input_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.sum(T.square(x))
    assert not y.requires_grad
    assert len(T.get_tape().nodes) == 0


def test_constructor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_debug_mode_asserts_after_ops():
    T.set_debug(True)
    try:
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            T.exp(Tensor([1000.0]))
    finally:
        T.set_debug(False)


def test_tapes_are_per_thread():
    x = Tensor([1.0], requires_grad=True)
    T.square(x)
    seen = []
    t = threading.Thread(target=lambda: seen.append(len(T.get_tape().nodes)))
    t.start()
    t.join()
    assert seen == [0]
    T.get_tape().clear()


ELEMENTWISE = {
    "add": (lambda a, b: T.sum(T.add(a, b) * T.add(a, b)), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: T.sum(T.square(T.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sum(T.square(T.sub(a, b))), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.sum(T.mul(a, b)), [(3, 4), (3, 4)]),
    "scale_neg": (lambda a: T.sum(T.square(T.neg(T.scale(a, 1.7)))), [(5,)]),
    "relu": (lambda a: T.sum(T.square(T.relu(a))), [(4, 4)]),
    "exp": (lambda a: T.sum(T.exp(a)), [(3, 3)]),
    "square": (lambda a: T.sum(T.square(a)), [(3, 3)]),
    "absolute": (lambda a: T.sum(T.absolute(a)), [(3, 3)]),
    "mean_axis": (lambda a: T.sum(T.square(T.mean(a, axis=0))), [(3, 5)]),
    "sum_axis": (lambda a: T.sum(T.square(T.sum(a, axis=1))), [(3, 5)]),
    "frobenius": (lambda a: T.frobenius_norm_sq(a), [(3, 5)]),
    "matmul": (lambda a, b: T.sum(T.square(T.matmul(a, b))), [(3, 4), (4, 2)]),
    "transpose": (lambda a: T.sum(T.mul(T.transpose(a), Tensor(np.arange(6.0).reshape(3, 2)))), [(2, 3)]),
    "reshape": (lambda a: T.sum(T.square(T.reshape(a, (3, 2)))), [(2, 3)]),
    "softmax_t2": (lambda a: T.sum(T.mul(T.softmax_rows(a, 2.0), Tensor(np.arange(12.0).reshape(3, 4)))),
                   [(3, 4)]),
    "log_softmax": (lambda a: T.sum(T.mul(T.log_softmax_rows(a, 0.7), Tensor(np.arange(12.0).reshape(3, 4)))),
                    [(3, 4)]),
    "l2_normalize": (lambda a: T.sum(T.mul(T.l2_normalize_rows(a), Tensor(np.arange(12.0).reshape(3, 4)))),
                     [(3, 4)]),
    "conv2d": (lambda x, w, b: T.sum(T.square(T.conv2d(x, w, b, padding=1))), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "gap": (lambda x: T.sum(T.square(T.global_avg_pool(x))), [(2, 3, 4, 4)]),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients_match_finite_differences(name, seed):
    fn, shapes = ELEMENTWISE[name]
    check_grad(fn, *shapes, seed=seed)


def test_log_gradient_on_positive_domain():
    check_grad(lambda a: T.sum(T.log(a)), (3, 3), lo=0.5, hi=2.0)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(rows, st.floats(0.05, 50.0))
def test_softmax_rows_sum_to_one_and_positive(x, tau):
    s = T.softmax_rows(Tensor(x), tau).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s > 0) or x.shape[1] == 1 or np.ptp(x) / tau > 700


@settings(max_examples=60, deadline=None)
@given(rows)
def test_l2_normalize_idempotent(x):
    once = T.l2_normalize_rows(Tensor(x)).data
    twice = T.l2_normalize_rows(Tensor(once)).data
    keep = np.linalg.norm(x, axis=1) >= T.NORM_EPS
    np.testing.assert_allclose(twice[keep], once[keep], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(rows)
def test_ops_stay_finite_on_bounded_inputs(x):
    t = Tensor(x, requires_grad=True)
    out = T.sum(T.log_softmax_rows(t)) + T.sum(T.softmax_rows(t, 0.5)) + T.sum(T.l2_normalize_rows(t))
    T.backward(out)
    assert np.isfinite(out.item()) and np.all(np.isfinite(t.grad))
