import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate

from hsfuse import tensor as T
from gradcases import OP_CASES, leaf, worst_error
from hsfuse.tensor import Tape, Tensor

SEEDS = range(20)
TOL = 1e-4


# -- forward examples ---------------------------------------------------------------


def test_leaky_relu_examples():
    out = T.leaky_relu(Tensor(np.array([2.0, -1.0])), 0.2).data
    np.testing.assert_allclose(out, [2.0, -0.2])


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ValueError):
        T.leaky_relu(Tensor(np.ones(2)), 1.5)


def test_clamp_examples():
    np.testing.assert_array_equal(T.clamp01(Tensor(np.array([0.5, -3.0, 7.0]))).data, [0.5, 0.0, 1.0])


def test_softmax_examples():
    c = T.softmax(Tensor(np.zeros((4, 1, 1))), "channel").data
    np.testing.assert_allclose(c.ravel(), 0.25)
    two = T.softmax(Tensor(np.array([0.0, np.log(3.0)]).reshape(2, 1, 1)), "channel").data
    np.testing.assert_allclose(two.ravel(), [0.25, 0.75])


def test_concat_examples():
    a, b = Tensor(np.zeros((2, 3, 3))), Tensor(np.ones((3, 3, 3)))
    assert T.concat_channels(a, b).shape == (5, 3, 3)
    empty = Tensor(np.zeros((0, 3, 3)))
    np.testing.assert_array_equal(T.concat_channels(b, empty).data, b.data)


def test_conv2d_matches_scipy_correlation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 9, 9))
    k = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), padding=1).data
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.stack([correlate(pad, k[o], mode="valid")[0] for o in range(4)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_block_filter_and_avg_pool():
    x = np.arange(16.0).reshape(1, 4, 4)
    box = np.full((2, 2), 0.25)
    np.testing.assert_allclose(T.block_filter(Tensor(x), Tensor(box)).data,
                               T.avg_pool(Tensor(x), 2).data)
    np.testing.assert_allclose(T.avg_pool(Tensor(x), 2).data[0], [[2.5, 4.5], [10.5, 12.5]])


def test_non_finite_forward_is_an_error():
    with pytest.raises(T.NonFiniteError), np.errstate(invalid="ignore"):
        T.log(Tensor(np.array([-1.0])))


def test_normalize_sum_zero_is_an_error():
    with pytest.raises(ValueError):
        T.normalize_sum(Tensor(np.zeros((3, 2))), axis=0)


def test_ops_outside_tape_are_not_recorded():
    x = leaf(np.ones(3))
    with Tape() as tape:
        T.scale(x, 2.0)
    T.scale(x, 3.0)
    assert len(tape.nodes) == 1


# -- reverse-pass examples ----------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 3)))
    with Tape() as tape:
        loss = T.reduce_sum(x)
    T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_backward_of_l1_against_zero():
    x = leaf(np.random.default_rng(0).uniform(0.1, 1.0, (2, 3, 3)))
    with Tape() as tape:
        loss = T.l1_loss(x, np.zeros_like(x.data))
    T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, 1.0 / x.size)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ValueError):
        T.backward(y, tape)


def test_gradient_accumulates_over_reuse():
    x = leaf(np.array([1.0, 2.0]))
    with Tape() as tape:
        loss = T.reduce_sum(T.mul(x, x))
    T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data)


# -- finite-difference checks, every differentiable op, 20 seeds --------------------


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("case", sorted(OP_CASES))
def test_op_gradients(case, seed):
    assert worst_error(case, seed) <= TOL


def test_grad_conv_sum_example():
    # The documented case: sum(conv2d(x, k)) on a 2x5x5 input.
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(2, 5, 5)))
    k = leaf(rng.normal(size=(1, 2, 3, 3)))
    assert T.gradcheck(lambda: T.reduce_sum(T.conv2d(x, k)), (x, k)) <= TOL


# -- properties ---------------------------------------------------------------------


finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 2, 4), elements=finite), st.sampled_from(["channel", "spatial"]))
def test_softmax_sums_to_one(x, axis):
    out = T.softmax(Tensor(x), axis).data
    sums = out.sum(axis=0) if axis == "channel" else out.sum(axis=(1, 2))
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_clamp_range(x):
    out = T.clamp01(Tensor(x)).data
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- optimizer ----------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = T.AdamState()
    T.adam_step(p, {"w": np.array([2.0, -0.5, 1e-3])}, state, lr=0.01)
    # Bias correction makes the first step m/sqrt(v) = sign(g), up to eps.
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 4))
    p = {"w": Tensor(np.zeros(4), requires_grad=True)}
    state = T.AdamState()
    m = v = np.zeros(4)
    ref = np.zeros(4)
    for t, g in enumerate(grads, 1):
        T.adam_step(p, {"w": g}, state, lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, ref, rtol=1e-12)


def test_gradcheck_refuses_float32():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        T.gradcheck(lambda: T.reduce_sum(x), [x])
