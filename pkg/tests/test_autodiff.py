import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpadapter.autodiff import (
    GradTape,
    ModelParams,
    backward,
    cross_entropy_loss,
    forward,
    init_mlp,
    loss_and_gradient,
    per_sample_cross_entropy,
    per_sample_gradients,
    predict,
    square,
    tensor_sum,
)
from dpadapter.errors import InputError, ShapeError, StateError


def _batch(seed, n=6, d=5, k=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.integers(0, k, size=n)


def _fd_gradient(model, x, y, h=1e-5):
    theta = model.flatten()
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        lp = float(cross_entropy_loss(forward(model.unflatten(theta + e), x), y).data)
        lm = float(cross_entropy_loss(forward(model.unflatten(theta - e), x), y).data)
        out[j] = (lp - lm) / (2 * h)
    return out


def test_identity_layer_returns_input():
    model = ModelParams([(np.eye(4), np.zeros(4))])
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(forward(model, x).data, x)


def test_zero_model_gives_zero_logits():
    model = ModelParams([(np.zeros((5, 7)), np.zeros(7)), (np.zeros((7, 3)), np.zeros(3))])
    x = np.random.default_rng(1).normal(size=(4, 5)) * 100
    assert np.array_equal(forward(model, x).data, np.zeros((4, 3)))


def test_forward_matches_hand_rolled_oracle():
    model = init_mlp([5, 9, 3], seed=7)
    x = np.random.default_rng(7).normal(size=(6, 5))
    (w1, b1), (w2, b2) = model.layers
    hidden = np.zeros((6, 9))
    for i in range(6):
        for j in range(9):
            hidden[i, j] = max(0.0, sum(x[i, a] * w1[a, j] for a in range(5)) + b1[j])
    expected = np.array([[sum(hidden[i, a] * w2[a, j] for a in range(9)) + b2[j]
                          for j in range(3)] for i in range(6)])
    np.testing.assert_allclose(forward(model, x).data, expected, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(predict(model, x), forward(model, x).data)


def test_shape_error_names_offending_layer():
    with pytest.raises(ShapeError) as exc:
        ModelParams([(np.zeros((4, 5)), np.zeros(5)), (np.zeros((6, 2)), np.zeros(2))])
    assert exc.value.layer == 1
    model = init_mlp([4, 3], seed=0)
    with pytest.raises(ShapeError) as exc:
        forward(model, np.zeros((2, 5)))
    assert exc.value.layer == 0


def test_uniform_logits_give_log_k():
    for k in (2, 5, 10):
        loss = cross_entropy_loss(np.zeros((3, k)), np.array([0, 1, k - 1]))
        assert float(loss.data) == pytest.approx(math.log(k), rel=1e-15)


def test_large_margin_logits_match_mpmath():
    mpmath.mp.dps = 50
    logits = np.array([[1000.0, 0.0, -1000.0], [0.0, 800.0, 799.0]])
    labels = np.array([1, 2])
    losses = per_sample_cross_entropy(logits, labels).data
    assert np.all(np.isfinite(losses))
    for row, y, got in zip(logits, labels, losses):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row))
        expected = float(lse - mpmath.mpf(row[y]))
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_mean_loss_equals_mean_of_per_sample_oracle():
    logits = np.array([[0.3, -1.2, 2.0], [1.0, 1.0, -0.5]])
    labels = np.array([2, 0])
    per = [-(row[y] - math.log(sum(math.exp(v) for v in row))) for row, y in zip(logits, labels)]
    assert float(cross_entropy_loss(logits, labels).data) == pytest.approx(np.mean(per), rel=1e-14)


def test_label_out_of_range():
    with pytest.raises(InputError):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(InputError):
        cross_entropy_loss(np.zeros((2, 3)), np.array([-1, 0]))


def test_quadratic_loss_gradient_is_theta():
    tape = GradTape()
    theta = np.random.default_rng(3).normal(size=7)
    t = tape.leaf(theta)
    loss = tensor_sum(square(t)) * 0.5
    tape.backward(loss.index)
    np.testing.assert_array_equal(tape.grad_of(t), theta)


def test_constant_loss_has_zero_gradient():
    model = init_mlp([3, 4, 2], seed=0)
    logits = forward(model, np.ones((2, 3)))
    const = logits.tape.leaf(np.array(5.0))
    g = backward(const)
    assert g.shape == (model.dim,)
    assert not g.any()


def test_backward_before_forward_is_state_error():
    with pytest.raises(StateError):
        backward(GradTape())
    with pytest.raises(StateError):
        GradTape().grad_of(None)


@pytest.mark.parametrize("seed", range(100))
def test_gradient_matches_finite_differences(seed):
    model = init_mlp([4, 5, 3], seed=seed)
    x, y = _batch(seed, n=5, d=4, k=3)
    _, g = loss_and_gradient(model, x, y)
    fd = _fd_gradient(model, x, y)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("method", ["vectorized", "replay"])
def test_per_sample_mean_equals_batch_gradient(method):
    model = init_mlp([5, 8, 6, 3], seed=2)
    x, y = _batch(11, n=8)
    per = per_sample_gradients(model, x, y, method=method)
    assert per.shape == (8, model.dim)
    _, g = loss_and_gradient(model, x, y)
    np.testing.assert_allclose(per.mean(axis=0), g, rtol=0, atol=1e-10)


def test_per_sample_methods_agree():
    model = init_mlp([5, 8, 3], seed=4)
    x, y = _batch(5, n=7)
    a = per_sample_gradients(model, x, y, method="vectorized")
    b = per_sample_gradients(model, x, y, method="replay")
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_single_sample_and_duplicates():
    model = init_mlp([5, 8, 3], seed=4)
    x, y = _batch(6, n=1)
    per = per_sample_gradients(model, x, y)
    np.testing.assert_allclose(per[0], loss_and_gradient(model, x, y)[1], atol=1e-14)
    xx, yy = np.vstack([x, x]), np.concatenate([y, y])
    per = per_sample_gradients(model, xx, yy)
    np.testing.assert_array_equal(per[0], per[1])


def test_empty_batch_is_input_error():
    model = init_mlp([5, 3], seed=0)
    with pytest.raises(InputError):
        per_sample_gradients(model, np.zeros((0, 5)), np.zeros(0, dtype=int))


def test_backward_is_linear():
    model = init_mlp([5, 8, 3], seed=9)
    x, y = _batch(9, n=6)
    a, b = 0.7, -2.5
    logits = forward(model, x)
    l1 = cross_entropy_loss(logits, y)
    l2 = tensor_sum(square(logits))
    combo = l1 * a + l2 * b
    g = backward(combo)
    g1 = backward(cross_entropy_loss(forward(model, x), y))
    g2 = backward(tensor_sum(square(forward(model, x))))
    np.testing.assert_allclose(g, a * g1 + b * g2, rtol=0, atol=1e-10)


def test_determinism():
    x, y = _batch(3)
    runs = [loss_and_gradient(init_mlp([5, 7, 3], seed=21), x, y) for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(1, 6), min_size=2, max_size=4), seed=st.integers(0, 2**16))
def test_flatten_round_trip(sizes, seed):
    model = init_mlp(sizes, seed=seed)
    again = ModelParams.from_flat(sizes, model.flatten())
    assert again.sizes == sizes
    assert np.array_equal(again.flatten(), model.flatten())
    with pytest.raises(ShapeError):
        ModelParams.from_flat(sizes, np.zeros(model.dim + 1))
