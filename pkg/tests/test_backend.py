import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import FD_RTOL_OP, finite_difference_check, input_gradient_check
from resformer_mtl.backend import Parameter, RngState, ShapeError, Tensor, no_grad, ops


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_all_ones_center_and_corner():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == out[0, 0, 0, 2] == out[0, 0, 2, 0] == out[0, 0, 2, 2] == 4


def test_conv_dilated_one_hot():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=2, dilation=2).data[0, 0]
    expected = oracles.conv2d(x, np.ones((1, 1, 3, 3)), pad=2, dil=2)[0, 0]
    ones = {(r, c) for r in (0, 2, 4) for c in (0, 2, 4)}
    assert {tuple(ix) for ix in np.argwhere(out == 1)} == ones
    assert out.sum() == 9
    np.testing.assert_array_equal(out, expected)


def test_conv_stride_shape():
    out = ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(ShapeError, match="axis"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("stride,pad,dil", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 6, 6), (2, 0, 1)])
def test_conv_matches_loop_oracle(rng, stride, pad, dil):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, pad, dil), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(1, 12), w=st.integers(1, 12), k=st.sampled_from([1, 3, 5]),
    stride=st.integers(1, 3), pad=st.integers(0, 3), dil=st.integers(1, 3),
)
def test_conv_shape_formula(h, w, k, stride, pad, dil):
    ho = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
    x = Tensor(np.zeros((1, 2, h, w)))
    wt = Tensor(np.zeros((3, 2, k, k)))
    if ho < 1 or wo < 1:
        with pytest.raises(ShapeError):
            ops.conv2d(x, wt, stride=stride, padding=pad, dilation=dil)
    else:
        assert ops.conv2d(x, wt, stride=stride, padding=pad, dilation=dil).shape == (1, 3, ho, wo)


@pytest.mark.parametrize("stride,pad,dil", [(1, 1, 1), (2, 1, 1), (1, 3, 3)])
def test_conv_gradients(rng, stride, pad, dil):
    x = Parameter(rng.standard_normal((2, 3, 6, 6)))
    w = Parameter(rng.standard_normal((2, 3, 3, 3)))
    b = Parameter(rng.standard_normal(2))
    proj = rng.standard_normal(ops.conv2d(x, w, b, stride, pad, dil).shape)
    res = finite_difference_check(
        lambda: (ops.conv2d(x, w, b, stride, pad, dil) * proj).sum(), [x, w, b], 60, rng
    )
    assert max(r[2] for r in res) < FD_RTOL_OP


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def test_batch_norm_eval_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = ops.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(out.data, x, rtol=1e-5)  # equal up to the eps term


def test_batch_norm_train_constant_is_zero():
    rm, rv = np.zeros(1), np.ones(1)
    out = ops.batch_norm(np.full((2, 1, 3, 3), 7.0), np.ones(1), np.zeros(1), rm, rv, training=True)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_batch_norm_train_two_values():
    rm, rv = np.zeros(1), np.ones(1)
    x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    out = ops.batch_norm(x, np.ones(1), np.zeros(1), rm, rv, training=True).data.ravel()
    np.testing.assert_allclose(out, [-1, 1], atol=1e-2)
    # EMA update: momentum 0.1, unbiased variance 2
    np.testing.assert_allclose(rm, [0.1])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 2.0])


def test_batch_norm_degenerate_variance():
    with pytest.raises(ValueError, match="more than one"):
        ops.batch_norm(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True)


def test_batch_norm_gradients(rng):
    x = Parameter(rng.standard_normal((3, 2, 3, 3)))
    g = Parameter(rng.uniform(0.5, 1.5, 2))
    b = Parameter(rng.standard_normal(2))
    proj = rng.standard_normal(x.shape)

    def loss():
        return (ops.batch_norm(x, g, b, np.zeros(2), np.ones(2), training=True) * proj).sum()

    assert max(r[2] for r in finite_difference_check(loss, [x, g, b], 40, rng)) < FD_RTOL_OP


def test_layer_norm_examples():
    np.testing.assert_allclose(ops.layer_norm(np.full((2, 4), 3.0), np.ones(4), np.zeros(4)).data, 0.0)
    np.testing.assert_allclose(
        ops.layer_norm(np.random.default_rng(0).standard_normal((2, 4)), np.zeros(4), np.full(4, 0.7)).data, 0.7
    )
    np.testing.assert_allclose(ops.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2)).data, [[-1, 1]], atol=1e-2)


def test_layer_norm_errors():
    with pytest.raises(ShapeError):
        ops.layer_norm(np.zeros((2, 0)), np.ones(0), np.zeros(0))
    with pytest.raises(ShapeError):
        ops.layer_norm(np.zeros((2, 3)), np.ones(4), np.zeros(4))


def test_layer_norm_matches_oracle_and_gradients(rng):
    x = Parameter(rng.standard_normal((2, 5, 6)))
    g, b = Parameter(rng.standard_normal(6)), Parameter(rng.standard_normal(6))
    np.testing.assert_allclose(ops.layer_norm(x, g, b).data, oracles.layer_norm(x.data, g.data, b.data), atol=1e-12)
    proj = rng.standard_normal(x.shape)
    res = finite_difference_check(lambda: (ops.layer_norm(x, g, b) * proj).sum(), [x, g, b], 40, rng)
    assert max(r[2] for r in res) < FD_RTOL_OP


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_gelu_is_exact_erf_form(rng):
    x = rng.standard_normal(50) * 3
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, oracles.gelu(x), atol=1e-14)


def test_softmax_uniform_and_shift_invariance(rng):
    np.testing.assert_allclose(ops.softmax(Tensor(np.full(4, 3.3))).data, [0.25] * 4)
    x = rng.standard_normal((3, 7))
    np.testing.assert_allclose(ops.softmax(Tensor(x + 12.5), axis=1).data, ops.softmax(Tensor(x), axis=1).data, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_properties(values):
    out = ops.softmax(Tensor(np.array(values))).data
    assert abs(out.sum() - 1.0) < 1e-6
    assert np.all(out > 0)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        ops.softmax(Tensor(np.zeros((2, 2))), axis=2)


def test_sigmoid_stable_extremes():
    out = ops.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("fn", [ops.gelu, ops.sigmoid, lambda t: ops.softmax(t, axis=1), ops.relu])
def test_activation_gradients(rng, fn):
    x = rng.standard_normal((3, 5))
    res = input_gradient_check(fn, x, rng)
    assert max(r[2] for r in res) < FD_RTOL_OP


# ---------------------------------------------------------------------------
# pooling, linear, upsampling, structural ops
# ---------------------------------------------------------------------------

def test_max_pool_example():
    assert ops.max_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2).data.item() == 4


def test_max_pool_matches_oracle_and_window_error(rng):
    x = rng.standard_normal((2, 3, 6, 8))
    np.testing.assert_array_equal(ops.max_pool2d(Tensor(x), 2, 2).data, oracles.max_pool2d(x, 2, 2))
    with pytest.raises(ShapeError):
        ops.max_pool2d(Tensor(np.zeros((1, 1, 1, 4))), 2, 2)


def test_global_avg_pool():
    np.testing.assert_allclose(ops.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.5))).data, 1.5)
    assert ops.global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 2.5


def test_linear_examples(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(ops.linear(Tensor(x), np.eye(3), np.zeros(3)).data, x)
    np.testing.assert_array_equal(ops.linear(Tensor(x), np.zeros((2, 3)), np.array([1.0, -2.0])).data, np.tile([1.0, -2.0], (4, 1)))
    assert ops.linear(Tensor([[2.0, 3.0]]), np.array([[1.0, 1.0]]), np.zeros(1)).data.tolist() == [[5.0]]
    with pytest.raises(ShapeError):
        ops.linear(Tensor(x), np.zeros((2, 4)), np.zeros(2))


def test_upsample_constant_and_shape():
    out = ops.upsample_bilinear2x(Tensor(np.full((1, 2, 4, 4), 3.25)))
    assert out.shape == (1, 2, 8, 8)
    np.testing.assert_allclose(out.data, 3.25)


def test_upsample_ramp_rows_identical():
    out = ops.upsample_bilinear2x(Tensor(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]))).data[0, 0]
    expected_row = oracles.upsample_bilinear2x(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]))[0, 0, 0]
    for row in out:
        np.testing.assert_allclose(row, expected_row, atol=1e-15)
    np.testing.assert_allclose(expected_row, [0.0, 0.25, 0.75, 1.0])


@pytest.mark.parametrize("h,w", [(1, 1), (1, 3), (2, 2), (5, 4)])
def test_upsample_matches_oracle_and_gradient(rng, h, w):
    x = rng.standard_normal((2, 3, h, w))
    np.testing.assert_allclose(ops.upsample_bilinear2x(Tensor(x)).data, oracles.upsample_bilinear2x(x), atol=1e-13)
    assert max(r[2] for r in input_gradient_check(ops.upsample_bilinear2x, x, rng)) < FD_RTOL_OP


def test_concat_add_mul(rng):
    a, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))
    assert ops.concat([Tensor(a), Tensor(b)], axis=1).shape == (2, 5, 3, 3)
    np.testing.assert_array_equal(ops.add(Tensor(a), np.zeros_like(a)).data, a)
    np.testing.assert_array_equal(ops.mul(Tensor(a), np.ones((1, 2, 1, 1))).data, a)
    with pytest.raises(ShapeError):
        ops.concat([Tensor(a), Tensor(rng.standard_normal((2, 3, 4, 3)))], axis=1)
    with pytest.raises(ShapeError):
        ops.add(Tensor(a), Tensor(np.zeros((2, 3, 3, 3))))


def test_broadcast_gradients(rng):
    a = Parameter(rng.standard_normal((2, 3, 4)))
    b = Parameter(rng.standard_normal((1, 3, 1)))
    proj = rng.standard_normal((2, 3, 4))
    res = finite_difference_check(lambda: ((a * b + a / (b * b + 1.0) - b) * proj).sum(), [a, b], 40, rng)
    assert max(r[2] for r in res) < FD_RTOL_OP


def test_structural_op_gradients(rng):
    x = rng.standard_normal((2, 3, 4, 5))

    def fn(t):
        r = ops.roll(t, (1, -2), (2, 3))
        r = ops.pad(r, ((0, 0), (0, 0), (0, 2), (1, 1)))
        r = ops.transpose(r, (0, 2, 3, 1))[:, 1:4]
        return ops.max(ops.reshape(r, (2, -1, 3)), axis=1)

    assert max(r[2] for r in input_gradient_check(fn, x, rng)) < FD_RTOL_OP


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_linear_function(rng):
    x = rng.standard_normal(5)
    w = Parameter(rng.standard_normal(5))
    (w * x).sum().backward()
    np.testing.assert_array_equal(w.grad, x)


def test_backward_relu_subgradient():
    w = Parameter(np.array([-1.0, 2.0]))
    ops.relu(w).sum().backward()
    np.testing.assert_array_equal(w.grad, [0.0, 1.0])
    z = Parameter(np.array([0.0]))
    ops.relu(z).sum().backward()
    assert z.grad[0] == 0.0


def test_backward_accumulates_and_requires_scalar(rng):
    x = rng.standard_normal(3)
    w = Parameter(np.ones(3))
    (w * x).sum().backward()
    (w * x).sum().backward()
    np.testing.assert_allclose(w.grad, 2 * x)
    with pytest.raises(ShapeError, match="scalar"):
        (w * x).backward()


def test_shared_subexpression_gradient():
    w = Parameter(np.array([3.0]))
    y = w * w
    (y + y * w).sum().backward()  # d/dw (w^2 + w^3) = 2w + 3w^2
    np.testing.assert_allclose(w.grad, [6.0 + 27.0])


def test_no_grad_records_nothing():
    w = Parameter(np.ones(2))
    with no_grad():
        out = (w * 2.0).sum()
    assert not out.requires_grad


def test_parameter_grad_shape_invariant(rng):
    w = Parameter(rng.standard_normal((3, 4)))
    assert w.grad.shape == w.shape and not w.grad.any()
    (w * 2.0).sum().backward()
    assert w.grad.shape == w.shape


# ---------------------------------------------------------------------------
# RNG determinism
# ---------------------------------------------------------------------------

def test_rng_state_reproducible():
    a, b = RngState(42).generator(), RngState(42).generator()
    np.testing.assert_array_equal(a.standard_normal(10), b.standard_normal(10))
    np.testing.assert_array_equal(RngState(7).spawn(3).random(4), RngState(7).spawn(3).random(4))
    assert not np.array_equal(RngState(7).spawn(3).random(4), RngState(7).spawn(4).random(4))
    with pytest.raises(ValueError):
        RngState(-1)
