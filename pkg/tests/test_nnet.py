"""Tensor engine: forward pass, losses, gradients, Adam and the lr schedule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdrqlab.nnet import (
    Batch,
    DimensionError,
    Layer,
    Network,
    OptimState,
    Quadratic,
    adam_step,
    cross_entropy,
    finite_diff_grad,
    forward,
    grad,
    lr_schedule,
    train,
)


def _random_batch(rng, n, d, classes=2):
    return Batch(rng.normal(size=(n, d)), rng.integers(0, classes, size=n))


def _with_random_biases(net, rng):
    # zero biases can put a relu exactly on its kink, where central differences are meaningless
    params = net.params()
    for k in range(1, len(params), 2):
        params[k] = rng.normal(0.0, 0.3, size=params[k].shape)
    return net.with_params(params)


def _max_rel_err(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


class TestForward:
    def test_identity_net(self):
        net = Network([Layer(np.eye(2), np.zeros(2), "identity")])
        np.testing.assert_array_equal(forward(net, np.array([[1.0, 2.0]])), [[1.0, 2.0]])

    def test_hand_matmul(self):
        net = Network([Layer([[2.0, 0.0], [0.0, 3.0]], [1.0, -1.0], "identity")])
        np.testing.assert_array_equal(forward(net, np.array([[1.0, 1.0]])), [[3.0, 2.0]])

    def test_relu_clamps(self):
        net = Network([Layer([[1.0]], [-5.0], "relu")])
        np.testing.assert_array_equal(forward(net, np.array([[2.0]])), [[0.0]])

    def test_input_dim_mismatch(self):
        net = Network([Layer(np.eye(2), np.zeros(2), "identity")])
        with pytest.raises(DimensionError):
            forward(net, np.ones((4, 3)))

    def test_layers_must_chain(self):
        with pytest.raises(DimensionError):
            Network([Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((2, 4)), np.zeros(2))])

    def test_flat_round_trip(self):
        net = Network.init([2, 5, 3], np.random.default_rng(0))
        again = net.from_flat(net.flat())
        for a, b in zip(net.params(), again.params()):
            np.testing.assert_array_equal(a, b)
        assert net.n_params == 2 * 5 + 5 + 5 * 3 + 3


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy(np.array([[0.0, 0.0]]), np.array([0])) == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated_logits(self):
        value = cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(value) and value == pytest.approx(0.0, abs=1e-12)

    def test_brute_force_softmax(self):
        z = np.array([1.0, 2.0, 3.0])
        expected = -math.log(math.exp(3.0) / sum(math.exp(v) for v in z))
        assert cross_entropy(z[None, :], np.array([2])) == pytest.approx(expected, rel=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(np.zeros((1, 2)), np.array([2]))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.data())
    def test_non_negative(self, logits, data):
        label = data.draw(st.integers(0, len(logits) - 1))
        assert cross_entropy(np.array([logits]), np.array([label])) >= 0.0


class TestGradients:
    def test_bias_gradient_zero_by_symmetry(self):
        net = Network([Layer(np.zeros((2, 2)), np.zeros(2), "identity")])
        batch = Batch(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0, 1]))
        np.testing.assert_allclose(grad(net, batch)[1], 0.0, atol=1e-15)

    def test_matches_finite_differences_on_20_nets(self):
        rng = np.random.default_rng(1234)
        for _ in range(20):
            depth = int(rng.integers(1, 4))
            sizes = [int(rng.integers(2, 6))] + [int(rng.integers(2, 9)) for _ in range(depth - 1)] + [3]
            net = _with_random_biases(Network.init(sizes, rng), rng)
            batch = _random_batch(rng, 16, sizes[0], 3)
            assert _max_rel_err(grad(net, batch), finite_diff_grad(net, batch)) < 1e-4

    def test_duplicated_sample_equals_single(self):
        rng = np.random.default_rng(3)
        net = Network.init([2, 4, 2], rng)
        one = Batch(np.array([[0.3, -0.7]]), np.array([1]))
        many = Batch(np.repeat(one.inputs, 5, axis=0), np.repeat(one.labels, 5))
        for a, b in zip(grad(net, one), grad(net, many)):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_finite_diff_on_quadratic(self):
        # L(w) = w^2 is Quadratic with diag 2 (0.5 * 2 * w^2)
        net = Network([Layer([[3.0]], [0.0], "identity")])
        loss = Quadratic(np.array([2.0, 0.0]))
        g = finite_diff_grad(net, None, loss, h=1e-5)
        assert g[0][0, 0] == pytest.approx(6.0, abs=1e-6)

    def test_finite_diff_rejects_zero_step(self):
        net = Network([Layer([[1.0]], [0.0], "identity")])
        with pytest.raises(ValueError):
            finite_diff_grad(net, None, Quadratic(np.ones(2)), h=0.0)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = [np.array([1.0, -2.0]), np.array([[0.5]])]
        state = OptimState.zeros_like(params)
        for _ in range(5):
            params2, state = adam_step(params, [np.zeros(2), np.zeros((1, 1))], state, 0.1)
            for a, b in zip(params, params2):
                np.testing.assert_array_equal(a, b)
        assert state.step == 5

    def test_first_step_is_signed_lr(self):
        g = np.array([0.3, -2.0, 1e-3])
        p0 = np.zeros(3)
        (p1,), _ = adam_step([p0], [g], OptimState.zeros_like([p0]), 1e-3)
        # bias-corrected first step: -lr * g / (|g| + eps)
        np.testing.assert_allclose(p1, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(p1, -1e-3 * np.sign(g), rtol=1e-4)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        p, g = [rng.normal(size=4)], [rng.normal(size=4)]
        state = OptimState.zeros_like(p)
        a, sa = adam_step(p, g, state, 0.01)
        b, sb = adam_step(p, g, state, 0.01)
        assert a[0].tobytes() == b[0].tobytes() and sa.m[0].tobytes() == sb.m[0].tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step([np.zeros(2)], [np.zeros(3)], OptimState.zeros_like([np.zeros(2)]), 0.1)


class TestLrSchedule:
    def test_warmup_endpoint(self):
        assert lr_schedule(50, 1000, 50, 1e-3) == pytest.approx(1e-3)

    def test_warmup_midpoint(self):
        assert lr_schedule(25, 1000, 50, 1e-3) == pytest.approx(5e-4)

    def test_last_step(self):
        total = 10000
        expected = 1e-3 * (1 - math.cos(math.pi / total)) / 2
        assert lr_schedule(total - 1, total, 0, 1e-3) == pytest.approx(expected, rel=1e-9)
        assert expected < 1e-9

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            lr_schedule(100, 100, 0, 1e-3)

    @settings(max_examples=50)
    @given(st.integers(2, 500), st.data())
    def test_bounded(self, total, data):
        warmup = data.draw(st.integers(0, total - 1))
        t = data.draw(st.integers(0, total - 1))
        assert 0.0 <= lr_schedule(t, total, warmup, 1.0) <= 1.0


def test_training_is_deterministic_and_learns():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(128, 2))
    batch = Batch(x, (x[:, 0] > 0).astype(int))

    def run():
        net = Network.init([2, 8, 2], np.random.default_rng(1))
        return train(net, batch, epochs=20, lr=0.02, batch_size=32, rng=np.random.default_rng(2))

    (a, trace), (b, _) = run(), run()
    assert a.flat().tobytes() == b.flat().tobytes()
    assert np.mean(trace[-4:]) < 0.5 * np.mean(trace[:4])
