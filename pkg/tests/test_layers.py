import numpy as np
import pytest

from src.modules.autodiff import Parameter, Tensor, backward, grad_check, mul, total
from src.modules.errors import LabelError, ShapeError
from src.modules.layers import (
    avg_pool,
    conv2d,
    conv_output_size,
    dense_block,
    global_avg_pool,
    linear,
    sigmoid_bce,
    softmax_cross_entropy,
    transition_pool,
)


def weighted_sum(out, seed=9):
    """Scalar reduction with random weights, so every output position matters."""
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return total(mul(out, weights))


def test_identity_kernel():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 5, 1)))
    out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_ones_convolution():
    out = conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((2, 2, 1, 1))), Tensor(np.zeros(1)))
    assert out.shape == (2, 2, 1)
    np.testing.assert_array_equal(out.data[..., 0], np.full((2, 2), 4.0))


def test_stride_and_padding_shapes():
    assert conv_output_size(8, 3, 1, 1) == 8
    assert conv_output_size(8, 3, 2, 1) == 4
    out = conv2d(Tensor(np.ones((2, 8, 8, 3))), Tensor(np.ones((3, 3, 3, 5))), Tensor(np.zeros(5)), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 5)


@pytest.mark.parametrize("size", [4, 5, 8, 9])
@pytest.mark.parametrize("kernel", [1, 2, 3])
@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("padding", [0, 1, 2])
def test_conv_output_shape_sweep(size, kernel, stride, padding):
    expected = (size + 2 * padding - kernel) // stride + 1
    assert conv_output_size(size, kernel, stride, padding) == expected
    out = conv2d(Tensor(np.ones((2, size, size, 2))), Tensor(np.ones((kernel, kernel, 2, 3))), Tensor(np.zeros(3)), stride, padding)
    assert out.shape == (2, expected, expected, 3)


def test_conv_rejects_channel_mismatch():

    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))), Tensor(np.zeros(1)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_gradients(stride, padding):
    rng = np.random.default_rng(1)
    x = Parameter("x", rng.normal(size=(2, 5, 5, 2)))
    w = Parameter("w", rng.normal(size=(3, 3, 2, 3)))
    b = Parameter("b", rng.normal(size=3))
    report = grad_check(lambda: weighted_sum(conv2d(x, w, b, stride, padding)), [x, w, b])
    assert report.max_relative_error < 1e-4, report.worst


def test_empty_dense_block_is_identity():
    x = Tensor(np.ones((4, 4, 3)))
    assert dense_block(x, []) is x


def test_dense_block_channels_and_gradient():
    rng = np.random.default_rng(2)
    x = Parameter("x", rng.normal(size=(1, 4, 4, 3)))
    layers = [
        (Parameter("w0", rng.normal(size=(3, 3, 3, 4))), Parameter("b0", rng.normal(size=4))),
        (Parameter("w1", rng.normal(size=(3, 3, 7, 4))), Parameter("b1", rng.normal(size=4))),
    ]
    assert dense_block(x, layers).shape == (1, 4, 4, 11)
    params = [x] + [param for layer in layers for param in layer]
    report = grad_check(lambda: weighted_sum(dense_block(x, layers)), params)
    assert report.max_relative_error < 1e-4, report.worst


def test_dense_block_rejects_wrong_kernel():
    with pytest.raises(ShapeError):
        dense_block(Tensor(np.ones((4, 4, 3))), [(Tensor(np.ones((3, 3, 2, 4))), Tensor(np.zeros(4)))])


def test_transition_pool_values():
    out = transition_pool(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)))
    assert out.data.reshape(-1).tolist() == [2.5]
    constant = transition_pool(Tensor(np.full((4, 6, 2), 1.5)))
    assert constant.shape == (2, 3, 2)
    np.testing.assert_array_equal(constant.data, 1.5)


def test_pool_spreads_a_quarter():
    x = Parameter("x", np.ones((1, 4, 4, 1)))
    backward(total(transition_pool(x)))
    np.testing.assert_array_equal(x.grad, np.full((1, 4, 4, 1), 0.25))


def test_pool_needs_even_dims():
    with pytest.raises(ShapeError):
        transition_pool(Tensor(np.ones((3, 4, 1))))


def test_avg_pool_gradient():
    x = Parameter("x", np.random.default_rng(3).normal(size=(2, 6, 6, 2)))
    assert avg_pool(x, 3).shape == (2, 2, 2, 2)
    assert grad_check(lambda: weighted_sum(avg_pool(x, 3)), [x]).passed


def test_global_avg_pool():
    out = global_avg_pool(Tensor(np.stack([np.full((3, 3), 2.0), np.full((3, 3), -1.0)], axis=-1)))
    assert out.data.tolist() == [2.0, -1.0]
    x = Parameter("x", np.random.default_rng(4).normal(size=(2, 3, 3, 2)))
    assert grad_check(lambda: weighted_sum(global_avg_pool(x)), [x]).passed


def test_linear_identity_and_gradient():
    x = Parameter("x", np.random.default_rng(5).normal(size=(3, 4)))
    w, b = Parameter("w", np.eye(4)), Parameter("b", np.zeros(4))
    np.testing.assert_array_equal(linear(x, w, b).data, x.data)
    assert linear(Tensor(np.ones(4)), w, b).shape == (4,)
    w.data = np.random.default_rng(6).normal(size=(4, 2))
    b.data = np.random.default_rng(7).normal(size=2)
    assert grad_check(lambda: weighted_sum(linear(x, w, b)), [x, w, b]).passed


def test_uniform_cross_entropy_is_log_k():
    probs, loss = softmax_cross_entropy(Tensor(np.zeros(4)), 2)
    np.testing.assert_allclose(probs, 0.25)
    assert loss.item() == pytest.approx(np.log(4), abs=1e-6)


def test_confident_cross_entropy():
    _, loss = softmax_cross_entropy(Tensor(np.array([10.0, 0.0, 0.0])), 0)
    assert loss.item() < 1e-4


def test_cross_entropy_gradient():
    logits = Parameter("z", np.array([[0.3, -1.2, 2.0, 0.1], [1.0, 0.0, -0.5, 0.2]]))
    probs, loss = softmax_cross_entropy(logits, [2, 0])
    backward(loss)
    expected = probs.copy()
    expected[[0, 1], [2, 0]] -= 1.0
    np.testing.assert_allclose(logits.grad, expected / 2)
    assert grad_check(lambda: softmax_cross_entropy(logits, [2, 0])[1], [logits]).passed


def test_softmax_rows_sum_to_one_and_ignore_shifts():
    logits = np.random.default_rng(10).normal(scale=3.0, size=(6, 5))
    targets = [0, 1, 2, 3, 4, 0]
    probs, loss = softmax_cross_entropy(Tensor(logits), targets)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    shifted_probs, shifted_loss = softmax_cross_entropy(Tensor(logits + 250.0), targets)
    np.testing.assert_allclose(shifted_probs, probs, rtol=0, atol=1e-12)
    assert shifted_loss.item() == pytest.approx(loss.item(), rel=1e-12)


def test_huge_logits_stay_finite():
    logits = Parameter("z", np.array([[1e6, -1e6, 0.0, 5e5], [-1e6, -1e6, -1e6, 1e6]]))
    probs, loss = softmax_cross_entropy(logits, [1, 3])
    backward(loss)
    assert np.isfinite(probs).all() and np.isfinite(loss.item()) and np.isfinite(logits.grad).all()
    assert loss.item() == pytest.approx(1e6, rel=1e-12)
    scores = Parameter("s", np.array([1e6, -1e6, 1e6, -1e6]))
    activations, bce = sigmoid_bce(scores, np.array([1.0, 0.0, 0.0, 1.0]))
    backward(bce)
    assert np.isfinite(activations).all() and np.isfinite(bce.item()) and np.isfinite(scores.grad).all()


def test_cross_entropy_rejects_bad_target():

    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor(np.zeros(4)), 4)


def test_bce_at_zero_is_log_two():
    activations, loss = sigmoid_bce(Tensor(np.zeros(22)), np.zeros(22))
    np.testing.assert_allclose(activations, 0.5)
    assert loss.item() == pytest.approx(np.log(2), abs=1e-6)


def test_bce_saturates_without_overflow():
    _, loss = sigmoid_bce(Tensor(np.array([20.0])), np.array([1.0]))
    assert loss.item() < 1e-8
    _, loss = sigmoid_bce(Tensor(np.array([-800.0, 800.0])), np.array([0.0, 1.0]))
    assert np.isfinite(loss.item())


def test_bce_gradient():
    rng = np.random.default_rng(8)
    logits = Parameter("z", rng.normal(size=(3, 5)))
    targets = (rng.random((3, 5)) < 0.5).astype(float)
    activations, loss = sigmoid_bce(logits, targets)
    backward(loss)
    np.testing.assert_allclose(logits.grad, (activations - targets) / 15)
    assert grad_check(lambda: sigmoid_bce(logits, targets)[1], [logits]).passed
