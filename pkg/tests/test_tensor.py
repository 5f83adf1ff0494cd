import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusionbench import tensor as T
from fusionbench.errors import ContractError, DimensionError, ValidationError
from fusionbench.tensor import BatchNormState, Tensor
from oracles import GRAD_CASES, direct_conv2d, gradient_error, naive_linear

SEEDS = range(20)


# -- linear ----------------------------------------------------------------------


def test_linear_identity():
    out = T.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [[1, 2]])


def test_linear_zero_weights_gives_bias_rows(rng):
    out = T.linear(Tensor(rng.normal(size=(5, 3))), Tensor(np.zeros((3, 2))), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, np.tile([3, 4], (5, 1)))


def test_linear_matches_triple_loop(rng):
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    with T.precision(np.float64):
        out = T.linear(Tensor(x), Tensor(W), Tensor(b)).data
    np.testing.assert_allclose(out, naive_linear(x, W, b), atol=1e-6)


def test_linear_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))


# -- conv2d ----------------------------------------------------------------------


def test_conv2d_full_window_sum():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), 1, 0)
    np.testing.assert_array_equal(out.data, [[[[10.0]]]])


def test_conv2d_delta_kernel_is_identity(rng):
    x = rng.normal(size=(2, 1, 5, 5)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), 1, 1).data, x)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), 1, 0).data, x[:, :, 1:4, 1:4])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_direct_loops(rng, stride, pad):
    x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    with T.precision(np.float64):
        out = T.conv2d(Tensor(x), Tensor(k), stride, pad).data
    ref = direct_conv2d(x, k, stride, pad)
    assert out.shape == ref.shape == (1, 3, (5 + 2 * pad - 3) // stride + 1, (5 + 2 * pad - 3) // stride + 1)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), 1, 0)


# -- pointwise, pooling, batchnorm ----------------------------------------------------


def test_relu_sign_cases():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_avg_pool_mean():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(T.avg_pool2d(x, 2).data, [[[[2.5]]]])


def test_avg_pool_window_must_divide():
    with pytest.raises(DimensionError):
        T.avg_pool2d(Tensor(np.ones((1, 1, 5, 5))), 2)


def test_batchnorm_train_normalizes(rng):
    x = rng.normal(3.0, 2.5, size=(8, 3, 4, 4))
    st_ = BatchNormState(3, dtype=np.float64)
    with T.precision(np.float64):
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, training=True).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
    # running stats moved 10% of the way toward the batch statistics
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))


def test_batchnorm_eval_uses_running_stats(rng):
    st_ = BatchNormState(2, dtype=np.float64)
    st_.running_mean, st_.running_var = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    x = rng.normal(size=(1, 2, 3, 3))
    with T.precision(np.float64):
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, training=False).data
    ref = (x - st_.running_mean[None, :, None, None]) / np.sqrt(st_.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(ContractError):
        T.batchnorm2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState(1), True)


# -- concat ------------------------------------------------------------------------


def test_concat_order():
    np.testing.assert_array_equal(T.concat(Tensor([[1.0]]), Tensor([[2.0, 3.0]])).data, [[1, 2, 3]])


def test_concat_512_blocks():
    out = T.concat(Tensor(np.zeros((2, 512))), Tensor(np.zeros((2, 512))))
    assert out.shape == (2, 1024)


def test_concat_backward_all_ones(rng):
    a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.backward(T.tsum(T.concat(a, b)))
    np.testing.assert_array_equal(a.grad, np.ones((3, 2)))
    np.testing.assert_array_equal(b.grad, np.ones((3, 4)))


def test_concat_leading_mismatch():
    with pytest.raises(DimensionError):
        T.concat(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))


# -- softmax cross-entropy -------------------------------------------------------------


def _onehot(idx, C):
    t = np.zeros((len(idx), C))
    t[np.arange(len(idx)), idx] = 1
    return t


def test_ce_uniform_logits():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((4, 10))), _onehot([0, 3, 5, 9], 10))
    assert float(loss.data) == pytest.approx(math.log(10), abs=1e-6)


def test_ce_saturated():
    z = np.zeros((1, 5))
    z[0, 2] = 1000
    assert float(T.softmax_cross_entropy(Tensor(z), _onehot([2], 5)).data) <= 1e-6


def test_ce_direct_logsumexp():
    z = np.array([[1.0, 2.0, 3.0]])
    expected = math.log(math.exp(1) + math.exp(2) + math.exp(3)) - 3
    with T.precision(np.float64):
        got = float(T.softmax_cross_entropy(Tensor(z), _onehot([2], 3)).data)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.4076, abs=1e-4)


@pytest.mark.parametrize("bad", [[[0.5, 0.5, 0.0]], [[1.0, 1.0, 0.0]], [[0.0, 0.0, 0.0]]])
def test_ce_rejects_non_one_hot(bad):
    with pytest.raises(ValidationError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array(bad))


# -- backward semantics ---------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_disconnected_input_gets_zeros(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    y = Tensor(rng.normal(size=(4,)), requires_grad=True)
    T.backward(T.tsum(y), inputs=[x])
    np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))
    np.testing.assert_array_equal(T.grad(T.tsum(y), [x])[0], np.zeros((2, 3)))


def test_backward_accumulates_fan_out(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    loss = T.tsum(T.add(T.mul(x, x), x))  # sum(x^2 + x)
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-6)


def test_backward_non_scalar_raises(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_each_node_visited_once():
    x = Tensor(np.ones(3), requires_grad=True)
    h = T.mul(x, 2.0)
    calls = []
    inner = h._backward

    def spy(g):
        calls.append(1)
        return inner(g)

    h._backward = spy
    T.backward(T.tsum(T.add(h, h)))
    assert calls == [1]
    np.testing.assert_array_equal(x.grad, [4.0, 4.0, 4.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad and y._parents == ()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.mul(Tensor(np.array([np.inf])), 0.0)
    finally:
        T.set_debug(False)


def test_float32_default_and_float64_mode():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# -- gradient oracle ----------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    errs = [gradient_error(GRAD_CASES[name], seed) for seed in SEEDS]
    assert max(errs) <= 1e-4, f"{name}: worst relative error {max(errs):.2e}"


def test_gradients_float32_within_1e3():
    # 32-bit autodiff vs the same graph in 64-bit
    for name, case in GRAD_CASES.items():
        for seed in range(20):
            with T.precision(np.float64):
                fn, arrays = case(np.random.default_rng(seed))
                t64 = [Tensor(a, requires_grad=True) for a in arrays]
                ref = T.grad(fn(*t64), t64)
            t32 = [Tensor(np.asarray(a, np.float32), requires_grad=True) for a in arrays]
            got = T.grad(fn(*t32), t32)
            for g, r in zip(got, ref):
                scale = max(np.abs(r).max(), 1e-3)
                assert np.abs(g - r).max() / scale <= 1e-3, name


# -- properties ---------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.data())
def test_concat_slicing_recovers_blocks(n, da, db, data):
    a = data.draw(arrays(np.float32, (n, da), elements=finite))
    b = data.draw(arrays(np.float32, (n, db), elements=finite))
    out = T.concat(Tensor(a), Tensor(b)).data
    np.testing.assert_array_equal(out[:, :da], a)
    np.testing.assert_array_equal(out[:, da:], b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.data())
def test_ce_shift_invariance(n, c, data):
    z = data.draw(arrays(np.float64, (n, c), elements=st.floats(-20, 20)))
    shift = data.draw(arrays(np.float64, (n, 1), elements=st.floats(-50, 50)))
    idx = data.draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n))
    t = _onehot(idx, c)
    with T.precision(np.float64):
        a = float(T.softmax_cross_entropy(Tensor(z), t).data)
        b = float(T.softmax_cross_entropy(Tensor(z + shift), t).data)
    assert abs(a - b) <= 1e-6


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_forward_backward_bit_identical(name):
    def run():
        fn, arrays = GRAD_CASES[name](np.random.default_rng(3))
        ts = [Tensor(np.asarray(a, np.float32), requires_grad=True) for a in arrays]
        loss = fn(*ts)
        return loss.data.tobytes(), [g.tobytes() for g in T.grad(loss, ts)]

    assert run() == run()
