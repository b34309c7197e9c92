"""Reconstruction, the distance penalty and the noise/curvature identity."""

import numpy as np
import pytest

from hdrqlab.analysis import hessian_quadform
from hdrqlab.checkpoint import QuantizedCheckpoint
from hdrqlab.hdrq import PtqConfig, distance_penalty, evaluate_loss, noise_loss_gap, reconstruct
from hdrqlab.nnet import Batch, Layer, Linear, Network, Quadratic, accuracy, train
from hdrqlab.quant import QuantizedTensor, QuantScheme, calibrate_step, quantize_uniform
from hdrqlab.synthdata import DomainSpec, make_domain

FAST = dict(scale=0.01)  # 200 iterations, 35 in the fake-quant tail


@pytest.fixture(scope="module")
def task():
    src = make_domain(DomainSpec("two-moons", 0.0, 0.15, 256, 256, seed=1))
    tgt = make_domain(DomainSpec("two-moons", 30.0, 0.15, 256, 256, seed=2))
    rng = np.random.default_rng(0)
    source, _ = train(Network.init([2, 16, 2], rng), src.train, epochs=40, lr=0.01, batch_size=64, rng=rng)
    adapted, _ = train(source.copy(), tgt.train, epochs=15, lr=0.003, batch_size=64, rng=rng)
    return source, adapted, tgt.train.split(64), tgt.test


class TestDistancePenalty:
    def test_identical(self):
        net = Network.init([2, 3, 2], np.random.default_rng(0))
        assert distance_penalty(net, net.copy()) == 0.0

    def test_scalar(self):
        a = Network([Layer([[3.0]], [0.0], "identity")])
        b = Network([Layer([[1.0]], [0.0], "identity")])
        assert distance_penalty(a, b) == 4.0

    def test_triangle_inequality(self):
        rng = np.random.default_rng(7)
        base = Network.init([3, 4, 2], rng)
        for _ in range(1000):
            a, b, c = (base.from_flat(rng.normal(size=base.n_params) * rng.uniform(0.1, 3)) for _ in range(3))
            lhs = distance_penalty(a, b)
            rhs = (np.sqrt(distance_penalty(a, c)) + np.sqrt(distance_penalty(c, b))) ** 2
            assert lhs <= rhs * (1 + 1e-12)


class TestNoiseLossGap:
    def _quadratic_setup(self):
        net = Network([Layer(np.array([[0.3, -0.2, 0.1], [0.5, 0.0, -0.4]]), np.zeros(2), "identity")])
        diag = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 9.0, 9.0])  # last two entries are the biases
        return net, Quadratic(diag), diag[:6].sum()

    def test_quadratic_closed_form(self):
        net, loss, tr = self._quadratic_setup()
        d = 0.2
        gap, se = noise_loss_gap(net, [QuantScheme(4, d)], None, 10_000, np.random.default_rng(0), loss)
        assert abs(gap - d * d / 24 * tr) <= 3 * se

    def test_zero_noise_limit(self):
        net, loss, _ = self._quadratic_setup()
        gap, _ = noise_loss_gap(net, [QuantScheme(4, 1e-9)], None, 200, np.random.default_rng(0), loss)
        assert abs(gap) < 1e-8  # first-order jitter only, O(step)

    def test_linear_loss_is_unbiased(self):
        net, _, _ = self._quadratic_setup()
        loss = Linear(np.random.default_rng(1).normal(size=8))
        gap, se = noise_loss_gap(net, [QuantScheme(4, 0.3)], None, 10_000, np.random.default_rng(2), loss)
        assert abs(gap) <= 3 * se

    def test_two_layer_net_matches_finite_difference_trace(self):
        # identity hidden layer keeps the loss twice differentiable
        rng = np.random.default_rng(0)
        net = Network.init([2, 6, 2], rng)
        net.layers[0].activation = "identity"
        x = rng.normal(size=(64, 2))
        batch = Batch(x, (x.sum(axis=1) > 0).astype(int))
        d = 0.1
        n = net.n_params
        weight_idx = np.concatenate([a.ravel() for a in net.from_flat(np.arange(n, dtype=float)).params()[0::2]])
        tr = sum(hessian_quadform(net, batch, np.eye(n)[int(i)]) for i in weight_idx)
        gap, se = noise_loss_gap(net, [QuantScheme(4, d)] * 2, batch, 10_000, np.random.default_rng(1),
                                 antithetic=True)
        assert abs(gap - d * d / 24 * tr) <= 3 * se

    def test_needs_enough_samples(self):
        net, loss, _ = self._quadratic_setup()
        with pytest.raises(ValueError):
            noise_loss_gap(net, [QuantScheme(4, 0.1)], None, 99, np.random.default_rng(0), loss)


class TestPtqConfig:
    def test_default_budget_scaled(self):
        cfg = PtqConfig()
        assert (cfg.n_iterations, cfg.n_tail) == (1000, 175)

    @pytest.mark.parametrize("kw", [dict(fake_quant_tail=0), dict(fake_quant_tail=20000), dict(drop_prob=1.5),
                                    dict(lambda_dist=-1.0), dict(method="adaround")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PtqConfig(**kw)

    def test_recon_only_overrides(self):
        eff = PtqConfig(method="recon_only").effective()
        assert eff.lambda_dist == 0.0 and eff.drop_prob == 0.0


class TestReconstruct:
    def test_trace_and_validity(self, task):
        source, adapted, calib, _ = task
        res = reconstruct(adapted, source, calib, PtqConfig(**FAST, seed=3))
        cfg = res.config
        assert len(res.loss_trace) == cfg.n_iterations == len(res.phase_trace)
        assert set(res.phase_trace) == {"noise", "fake_quant"}
        assert abs(res.phase_trace.count("fake_quant") - cfg.n_tail) <= len(adapted.layers)
        for w in res.quantized.weights:
            assert isinstance(w, QuantizedTensor)
            assert w.ints.min() >= w.scheme.qmin and w.ints.max() <= w.scheme.qmax
        assert evaluate_loss(res.quantized, calib) == res.final_loss
        again = np.sqrt(distance_penalty(res.quantized.to_network(), source))
        assert again == pytest.approx(res.distance_to_source, rel=1e-12)

    def test_recon_only_has_no_noise_phase(self, task):
        source, adapted, calib, _ = task
        res = reconstruct(adapted, source, calib, PtqConfig(**FAST, method="recon_only"))
        assert set(res.phase_trace) == {"fake_quant"}

    def test_deterministic(self, task):
        source, adapted, calib, _ = task
        a = reconstruct(adapted, source, calib, PtqConfig(**FAST, seed=5))
        b = reconstruct(adapted, source, calib, PtqConfig(**FAST, seed=5))
        assert a.loss_trace.tobytes() == b.loss_trace.tobytes()
        for wa, wb in zip(a.quantized.weights, b.quantized.weights):
            assert wa.ints.tobytes() == wb.ints.tobytes() and wa.scheme == wb.scheme

    def test_large_lambda_pulls_towards_source(self, task):
        source, adapted, calib, _ = task
        free = reconstruct(adapted, source, calib, PtqConfig(**FAST, lambda_dist=0.0, seed=1))
        tied = reconstruct(adapted, source, calib, PtqConfig(**FAST, lambda_dist=1e3, seed=1))
        assert tied.distance_to_source < free.distance_to_source

    def test_accuracy_survives_8_bit(self, task):
        source, adapted, calib, test = task
        res = reconstruct(adapted, source, calib, PtqConfig(**FAST, weight_bits=8))
        ck = res.quantized
        assert accuracy(ck.to_network(), test, ck.act_hook()) >= accuracy(adapted, test) - 0.01

    def test_fixed_point(self):
        # weights on a grid point and a margin so large that the loss gradient underflows to zero
        w0 = np.array([[2.0, 0.0], [-2.0, 0.0]])
        scheme = calibrate_step(w0, 4)
        w0 = quantize_uniform(w0, scheme).ints * scheme.step
        net = Network([Layer(w0 * 1.0, np.zeros(2), "identity")])
        x = np.array([[400.0, 0.0], [-400.0, 0.0]] * 8)
        calib = [Batch(x, np.array([0, 1] * 8))]
        cfg = PtqConfig(scale=0.01, lambda_dist=0.0, act_bits=32, method="hdrq", lr0=0.5)
        res = reconstruct(net, net.copy(), calib, cfg)
        np.testing.assert_array_equal(res.quantized.weights[0].ints, quantize_uniform(w0, scheme).ints)
        trail = np.convolve(res.loss_trace, np.ones(10) / 10, mode="valid")
        assert np.all(np.diff(trail) <= 0)

    def test_architecture_mismatch(self, task):
        source, _, calib, _ = task
        other = Network.init([2, 4, 2], np.random.default_rng(0))
        with pytest.raises(ValueError):
            reconstruct(other, source, calib, PtqConfig(**FAST))

    def test_empty_calibration(self, task):
        source, adapted, _, _ = task
        with pytest.raises(ValueError):
            reconstruct(adapted, source, [], PtqConfig(**FAST))


def test_checkpoint_from_float_network_is_not_quantized():
    net = Network.init([2, 3, 2], np.random.default_rng(0))
    ck = QuantizedCheckpoint.from_network(net)
    assert not ck.is_quantized and ck.weight_bits is None
