import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fssl.errors import NumericError, ShapeMismatch
from fssl.nn import (AdamState, Conv1d, Flatten, Linear, MaxPool1d, Network, ReLU, Softmax, adam_step,
                     check_gradients, cross_entropy_with_grad, loss_cross_entropy, loss_mse, mse_with_grad,
                     softmax)


def test_conv_delta_kernel_passes_input_through():
    net = Network([Conv1d("c", 1, 1, 3)], (1, 5))
    params = {"c.weight": np.array([[[1.0, 0.0, 0.0]]]), "c.bias": np.zeros(1)}
    out = net.predict(params, np.array([[5.0, 4, 3, 2, 1]]))
    assert out.tolist() == [[5.0, 4.0, 3.0]]


def test_conv_matches_direct_loop(rng):
    net = Network([Conv1d("c", 3, 4, 5)], (3, 12))
    params = net.init_params(rng, np.float64)
    params["c.bias"] = rng.normal(size=4)
    x = rng.normal(size=(2, 3, 12))
    out = net.predict(params, x)
    w, b = params["c.weight"], params["c.bias"]
    ref = np.zeros((2, 4, 8))
    for n in range(2):
        for o in range(4):
            for t in range(8):
                ref[n, o, t] = np.sum(w[o] * x[n, :, t:t + 5]) + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_softmax_of_equal_logits_is_uniform():
    assert np.allclose(softmax(np.zeros(5)), 0.2)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(z):
    p = Network([Softmax("s")], (z.shape[1],)).predict({}, z)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)
    assert np.all(p >= 0)


def test_maxpool_pairs_and_truncation():
    net = Network([MaxPool1d("p", 2)], (1, 6))
    assert net.predict({}, np.array([[1.0, 3, 2, 0, 7, 7]])).tolist() == [[3.0, 2.0, 7.0]]
    assert Network([MaxPool1d("p", 2)], (1, 7)).output_shape == (1, 3)


def test_maxpool_routes_gradient_to_first_maximum():
    net = Network([MaxPool1d("p", 2)], (1, 4))
    params = {}
    _, caches = net.forward(params, np.array([[[7.0, 7.0, 1.0, 2.0]]]))
    pool = net.layers[0]
    dx, _ = pool.backward(params, caches[0], np.array([[[1.0, 1.0]]]))
    assert dx.tolist() == [[[1.0, 0.0, 0.0, 1.0]]]


def test_relu_gradient_at_zero_is_zero():
    net = Network([ReLU("r")], (3,))
    _, caches = net.forward({}, np.array([[-1.0, 0.0, 2.0]]))
    dx, _ = net.layers[0].backward({}, caches[0], np.ones((1, 3)))
    assert dx.tolist() == [[0.0, 0.0, 1.0]]


def test_output_lengths():
    net = Network([Conv1d("c", 2, 4, 5), MaxPool1d("p"), Flatten("f")], (2, 45))
    assert net.shapes == [(2, 45), (4, 41), (4, 20), (80,)]


def test_mse_examples():
    assert loss_mse([1.0, 1.0], [1.0, 1.0]) == 0.0
    assert loss_mse([1.0, 1.0], [0.0, 2.0]) == 1.0
    with pytest.raises(ShapeMismatch):
        loss_mse([1.0], [1.0, 2.0])


@given(arrays(np.float64, 6, elements=st.floats(-100, 100)), st.floats(-10, 10))
def test_mse_is_quadratic_in_residual(residual, c):
    target = np.zeros(6)
    assert math.isclose(loss_mse(c * residual, target), c * c * loss_mse(residual, target),
                        rel_tol=1e-9, abs_tol=1e-12)


def test_cross_entropy_examples():
    assert math.isclose(loss_cross_entropy(np.zeros(5), 3), math.log(5), rel_tol=1e-12)
    assert math.isclose(loss_cross_entropy(np.array([10.0, 0.0]), 0), math.log1p(math.exp(-10)), rel_tol=1e-9)
    with pytest.raises(IndexError):
        loss_cross_entropy(np.zeros(3), 3)
    with pytest.raises(IndexError):
        loss_cross_entropy(np.zeros(3), -1)


def test_cross_entropy_is_stable_for_large_logits():
    assert math.isclose(loss_cross_entropy(np.array([1000.0, 0.0]), 1), 1000.0)


@given(arrays(np.float64, 5, elements=st.floats(-50, 50)), st.integers(0, 4), st.floats(-1e3, 1e3))
def test_cross_entropy_shift_invariance(z, label, shift):
    assert abs(loss_cross_entropy(z + shift, label) - loss_cross_entropy(z, label)) < 1e-6


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = np.array([[1.0, 2.0, 0.5]])
    _, g = cross_entropy_with_grad(z, [1])
    expected = softmax(z)
    expected[0, 1] -= 1
    assert np.allclose(g, expected)


def test_linear_gradient_of_sum(rng):
    net = Network([Linear("l", 4, 3)], (4,))
    params = net.init_params(rng, np.float64)
    x = rng.normal(size=4)
    out, caches = net.forward(params, x)
    grads = net.backward(params, caches, np.ones_like(out))
    assert np.allclose(grads["l.weight"], np.outer(np.ones(3), x))
    assert np.allclose(grads["l.bias"], np.ones(3))


def test_dead_relu_network_has_zero_gradients(rng):
    net = Network([Linear("a", 4, 5), ReLU("r"), Linear("b", 5, 2)], (4,))
    params = {k: np.zeros(v) for k, v in net.param_shapes().items()}
    params["a.bias"] = -np.ones(5)
    out, caches = net.forward(params, rng.normal(size=(3, 4)))
    _, dout = mse_with_grad(out, np.ones_like(out))
    grads = net.backward(params, caches, dout)
    for name in ("a.weight", "a.bias", "b.weight"):
        assert not np.any(grads[name])


def test_forward_is_pure(rng):
    net = Network([Conv1d("c", 2, 3, 3), ReLU("r"), Flatten("f"), Linear("l", 3 * 8, 2)], (2, 10))
    params = net.init_params(rng)
    x = rng.normal(size=(4, 2, 10))
    assert net.predict(params, x).tobytes() == net.predict(params, x).tobytes()


def test_forward_errors(rng):
    net = Network([Linear("l", 3, 2)], (3,))
    params = net.init_params(rng)
    with pytest.raises(ShapeMismatch):
        net.predict(params, np.zeros((2, 4)))
    with pytest.raises(NumericError):
        net.predict(params, np.array([[1.0, np.nan, 0.0]]))
    params["l.weight"][0, 0] = np.inf
    with pytest.raises(NumericError):
        net.predict(params, np.ones(3))


def test_init_is_bounded_and_seeded():
    net = Network([Linear("l", 10, 6)], (10,))
    a = net.init_params(np.random.default_rng(3))
    b = net.init_params(np.random.default_rng(3))
    assert a["l.weight"].tobytes() == b["l.weight"].tobytes()
    assert a["l.weight"].dtype == np.float32
    assert np.abs(a["l.weight"]).max() <= math.sqrt(6 / 16)
    assert not np.any(a["l.bias"])


def test_adam_first_step():
    params, state = adam_step(AdamState(), {"w": np.array([0.5])}, {"w": np.array([1.0])})
    assert math.isclose(0.5 - params["w"][0], 0.001, rel_tol=1e-6)
    assert state.t == 1


def test_adam_zero_gradient_and_zero_lr(rng):
    p = {"w": rng.normal(size=(3, 3)).astype(np.float32)}
    out, _ = adam_step(AdamState(), p, {"w": np.zeros((3, 3), np.float32)})
    assert out["w"].tobytes() == p["w"].tobytes()
    state = AdamState(lr=0.0)
    cur = p
    for _ in range(5):
        cur, state = adam_step(state, cur, {"w": rng.normal(size=(3, 3)).astype(np.float32)})
    assert cur["w"].tobytes() == p["w"].tobytes() and state.t == 5


def test_adam_symmetric_updates():
    p = {"a": np.array([1.0, 2.0]), "b": np.array([1.0, 2.0])}
    state = AdamState()
    for g in (0.3, -1.2, 0.7):
        p, state = adam_step(state, p, {"a": np.array([g, g]), "b": np.array([g, g])})
    assert p["a"].tobytes() == p["b"].tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step(AdamState(), {"w": np.zeros(3)}, {"w": np.zeros(4)})


def test_gradient_check_identity_linear(rng):
    net = Network([Linear("l", 4, 4)], (4,))
    params = {"l.weight": np.eye(4, dtype=np.float32), "l.bias": np.zeros(4, np.float32)}
    report = check_gradients(net, params, rng.normal(size=4), "mse", rng.normal(size=4))
    assert report.passed and report.max_rel_error < 1e-8


def _small_net(rng):
    net = Network([Conv1d("c1", 2, 3, 3), ReLU("r1"), MaxPool1d("p1"), Flatten("f"), Linear("l1", 3 * 5, 6),
                   ReLU("r2"), Linear("l2", 6, 4), Softmax("s")], (2, 12))
    return net, net.init_params(rng)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_small_networks(seed):
    rng = np.random.default_rng(seed)
    net, params = _small_net(rng)
    x = rng.normal(size=(3, 2, 12))
    assert check_gradients(net, params, x, "cross_entropy", rng.integers(0, 4, 3)).passed
    mse_net = Network(net.layers[:-1], net.input_shape)
    report = check_gradients(mse_net, params, x, "mse", rng.normal(size=(3, 4)))
    assert report.passed, str(report)
    assert report.checked == net.num_params()


def test_gradient_check_detects_corruption(rng):
    net, params = _small_net(rng)
    x = rng.normal(size=(2, 2, 12))
    labels = [0, 3]
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    out, caches = net.forward(p64, x, logits=True)
    grads = net.backward(p64, caches, cross_entropy_with_grad(out, labels)[1])
    idx = np.unravel_index(np.argmax(np.abs(grads["l2.weight"])), grads["l2.weight"].shape)
    grads["l2.weight"][idx] *= 2
    report = check_gradients(net, params, x, "cross_entropy", labels, analytic=grads)
    assert not report.passed
    assert report.worst_param == "l2.weight" and report.worst_index == tuple(idx)
