import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qesguard.numerics import (
    GradTape, ShapeError, Tensor, absolute, add, backward, clamp, conv2d, conv_output_size, crop2d,
    cross_entropy, gaussian_noise, global_avg_pool, l2_norm, linear, linf_norm, log_softmax, max_,
    max_relative_error, mean, mse, mul, numerical_grad, pad2d, relu, reshape, scale, sign, square, sub,
    sum_, tanh,
)


def _grad_check(f, x, tol=1e-3):
    """f maps a Tensor to a scalar Tensor; compare tape gradient to central differences."""
    with GradTape() as tape:
        t = Tensor(x, requires_grad=True)
        loss = f(t)
    g = backward(loss, tape)[t]
    num = numerical_grad(lambda v: f(Tensor(v)).item(), x, 1e-4)
    assert max_relative_error(g, num) < tol


def test_conv_zero_input():
    out = conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.random.default_rng(0).normal(size=(2, 1, 3, 3))))
    assert np.all(out.data == 0)


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_hand_sum_45():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.item() == 45.0


@pytest.mark.parametrize("h,k,s,p", [(32, 3, 2, 1), (32, 3, 1, 1), (7, 3, 2, 0), (5, 5, 1, 2), (9, 2, 3, 1)])
def test_conv_output_dims(h, k, s, p):
    x = Tensor(np.ones((1, 2, h, h)))
    out = conv2d(x, Tensor(np.ones((3, 2, k, k))), stride=s, padding=p)
    ho = (h + 2 * p - k) // s + 1
    assert out.shape == (1, 3, ho, ho) == (1, 3, conv_output_size(h, k, s, p), ho)


def test_conv_shape_errors():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), padding=-1)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(1, 2, 5, 5))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    lhs = conv2d(Tensor(a * x + b * y), w, padding=1).data
    rhs = a * conv2d(Tensor(x), w, padding=1).data + b * conv2d(Tensor(y), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_mean_gradient_is_one_over_n():
    x = np.random.default_rng(3).normal(size=(4, 5))
    with GradTape() as tape:
        t = Tensor(x, requires_grad=True)
        loss = mean(t)
    assert np.allclose(backward(loss, tape)[t], 1 / 20)


def test_mse_zero_gradient_at_minimum():
    x = np.array([[1.0, 2.0]])
    w = np.array([[0.5, 0.25]])
    with GradTape() as tape:
        wt = Tensor(w, requires_grad=True)
        loss = mse(linear(Tensor(x), wt), np.array([[1.0]]))
    assert loss.item() == 0.0
    assert np.all(backward(loss, tape)[wt] == 0)


def test_backward_requires_scalar():
    with GradTape() as tape:
        t = Tensor(np.ones(3), requires_grad=True)
        y = square(t)
    with pytest.raises((ShapeError, ValueError)):
        backward(y, tape)


def test_empty_tape_gives_zero_gradients():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = Tensor(np.array(1.0))
    g = backward(loss, tape)
    assert np.all(g[t] == 0)


def test_small_convnet_finite_differences():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    w1, w2 = rng.normal(size=(3, 2, 3, 3)) * 0.5, rng.normal(size=(2, 3, 3, 3)) * 0.5
    head = rng.normal(size=(3, 2))
    labels = np.array([0, 2])

    def net(a, b):
        h = relu(conv2d(x, a, stride=2, padding=1))
        h = tanh(conv2d(h, b, padding=1))
        return cross_entropy(linear(global_avg_pool(h), Tensor(head)), labels)

    with GradTape() as tape:
        a, b = Tensor(w1, requires_grad=True), Tensor(w2, requires_grad=True)
        loss = net(a, b)
    g = backward(loss, tape)
    n1 = numerical_grad(lambda v: net(Tensor(v), Tensor(w2)).item(), w1)
    n2 = numerical_grad(lambda v: net(Tensor(w1), Tensor(v)).item(), w2)
    assert max_relative_error(g[a], n1) < 1e-3
    assert max_relative_error(g[b], n2) < 1e-3


@pytest.mark.parametrize("name,f", [
    ("relu", lambda t: sum_(relu(t))),
    ("abs", lambda t: mean(absolute(t))),
    ("square", lambda t: sum_(square(t))),
    ("tanh", lambda t: sum_(tanh(t))),
    ("scale", lambda t: sum_(scale(t, -2.5))),
    ("add_sub_mul", lambda t: sum_(mul(add(t, 1.0), sub(t, 2.0)))),
    ("mean_axis", lambda t: sum_(square(mean(t, axis=(2, 3))))),
    ("max", lambda t: sum_(max_(reshape(t, (2, -1)), axis=1))),
    ("pad_crop", lambda t: sum_(square(crop2d(pad2d(t, 1, 2, 0, 1), 1, 0, 3, 3)))),
    ("log_softmax", lambda t: sum_(mul(log_softmax(reshape(t, (2, 9))), Tensor(np.arange(18.0).reshape(2, 9))))),
    ("cross_entropy", lambda t: cross_entropy(reshape(t, (2, 9)), [3, 7], reduction="sum")),
    ("clamp", lambda t: sum_(square(clamp(t, -0.5, 0.5)))),
    ("conv", lambda t: sum_(square(conv2d(t, Tensor(np.ones((2, 1, 2, 2))), stride=1, padding=1)))),
])
def test_op_gradients(name, f):
    # keep points away from kinks (relu/abs at 0, clamp edges, max ties)
    x = np.random.default_rng(5).uniform(0.1, 0.9, size=(2, 1, 3, 3)) * np.array([1, -1, 1])
    _grad_check(f, x)


def test_elementwise_examples():
    assert relu(Tensor(np.array(-2.0))).item() == 0
    assert float(clamp(1.2, 0, 1)) == 1.0
    with pytest.raises(ValueError):
        clamp(0.5, 1, 0)
    assert list(sign(np.array([-3.0, 0.0, 2.0]))) == [-1, 0, 1]
    assert l2_norm(np.array([3.0, 4.0])) == 5.0
    assert linf_norm(np.array([-7.0, 4.0])) == 7.0


def test_gaussian_noise_std_and_determinism():
    z = gaussian_noise((10 ** 6,), 0.1, seed=11)
    assert 0.099 <= z.std() <= 0.101
    assert np.array_equal(z, gaussian_noise((10 ** 6,), 0.1, seed=11))
    with pytest.raises(ValueError):
        gaussian_noise((3,), -0.1)


def test_tensor_rejects_nan_and_is_immutable():
    with pytest.raises(ValueError):
        Tensor(np.array([np.nan]))
    t = Tensor(np.ones(2))
    with pytest.raises(ValueError):
        t.data[0] = 5


def test_conv_is_deterministic():
    rng = np.random.default_rng(6)
    x, w = Tensor(rng.normal(size=(3, 3, 8, 8))), Tensor(rng.normal(size=(4, 3, 3, 3)))
    assert np.array_equal(conv2d(x, w, 2, 1).data, conv2d(x, w, 2, 1).data)
