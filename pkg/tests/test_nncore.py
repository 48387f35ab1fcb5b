import math

import mpmath
import numpy as np
import numpy.testing as npt
import pytest

from sievelab import nncore
from sievelab.nncore import (IDENTITY, RELU, Layer, Network, OptimizerConfig,
                             backward, cosine_lr, cross_entropy, forward,
                             init_network, load_network, n_parameters,
                             predict_probs, save_network, sgd_step, softmax)


def random_net(rng, sizes=None):
    if sizes is None:
        depth = rng.integers(1, 3)
        sizes = [int(rng.integers(2, 6))] + [int(rng.integers(3, 8)) for _ in range(depth)] \
                + [int(rng.integers(2, 5))]
    return init_network(sizes, rng)


def gradcheck_case(rng, kink_margin=1e-6):
    """Random (net, batch) pair whose pre-activations stay away from the relu
    kink, where the loss is not differentiable and finite differences are
    meaningless. Biases are randomized so no pre-activation is exactly zero."""
    while True:
        net = random_net(rng)
        for layer in net.layers:
            layer.bias[:] = rng.uniform(-0.5, 0.5, size=layer.bias.shape)
        m = int(rng.integers(1, 7))
        x = rng.normal(size=(m, net.n_inputs))
        y = rng.integers(0, net.n_outputs, size=m)
        a, min_abs_z = x, np.inf
        for layer in net.layers:
            z = a @ layer.weights.T + layer.bias
            min_abs_z = min(min_abs_z, np.abs(z).min())
            a = np.maximum(z, 0.0) if layer.activation == RELU else z
        if min_abs_z > kink_margin:
            return net, x, y


def flatten_params(net):
    return np.concatenate([np.concatenate([l.weights.ravel(), l.bias.ravel()])
                           for l in net.layers])


def set_params(net, flat):
    """In-place write of a flat parameter vector (test helper only)."""
    off = 0
    for layer in net.layers:
        w = layer.weights
        w.flat[:] = flat[off:off + w.size]
        off += w.size
        layer.bias[:] = flat[off:off + layer.bias.size]
        off += layer.bias.size


class TestSoftmax:
    def test_symmetry(self):
        npt.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            logits = rng.normal(scale=5.0, size=rng.integers(2, 8))
            shift = rng.normal(scale=100.0)
            npt.assert_allclose(softmax(logits + shift), softmax(logits),
                                rtol=0, atol=1e-12)

    def test_known_values_against_high_precision_oracle(self):
        logits = [1.0, 2.0, 3.0]
        with mpmath.workdps(50):
            exps = [mpmath.e**v for v in logits]
            total = sum(exps)
            expected = [float(v / total) for v in exps]
        npt.assert_allclose(softmax(logits), expected, rtol=0, atol=1e-15)

    def test_sum_and_positivity_property(self):
        # Strict positivity is guaranteed in float64 while the logit spread
        # stays below the exp underflow threshold (~745); uniform(+-300)
        # keeps every gap under 600.
        rng = np.random.default_rng(11)
        for _ in range(200):
            k = int(rng.integers(2, 12))
            p = softmax(rng.uniform(-300.0, 300.0, size=k))
            assert abs(p.sum() - 1.0) <= 1e-12
            assert np.all(p > 0)

    def test_stable_at_huge_magnitudes(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            p = softmax(rng.normal(scale=1e3, size=int(rng.integers(2, 8))))
            assert np.all(np.isfinite(p)) and np.all(p >= 0)
            assert abs(p.sum() - 1.0) <= 1e-12

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            softmax([1.0])
        with pytest.raises(ValueError):
            softmax([np.inf, 0.0])
        with pytest.raises(ValueError):
            softmax([np.nan, 0.0])


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        assert cross_entropy([0.0, 1.0, 0.0], 1) == 0.0

    def test_uniform(self):
        assert cross_entropy([0.25] * 4, 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_known_value_against_high_precision_oracle(self):
        with mpmath.workdps(50):
            expected = float(-mpmath.log(mpmath.mpf("0.1")))
        assert cross_entropy([0.1, 0.9], 0) == pytest.approx(expected, abs=1e-15)

    def test_probability_floor_keeps_loss_finite(self):
        loss = cross_entropy([1.0, 0.0], 1)
        assert loss == pytest.approx(-math.log(nncore.PROB_FLOOR))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy([0.5, 0.5], 2)

    def test_invalid_distribution(self):
        with pytest.raises(ValueError):
            cross_entropy([0.9, 0.3], 0)


class TestForward:
    def test_zero_net_gives_zero_logits(self):
        net = Network.fresh([Layer(np.zeros((3, 4)), np.zeros(3), IDENTITY)])
        npt.assert_array_equal(forward(net, np.ones((5, 4))), np.zeros((5, 3)))

    def test_identity_layer_passes_features_through(self):
        net = Network.fresh([Layer(np.eye(4), np.zeros(4), IDENTITY)])
        x = np.random.default_rng(0).normal(size=(6, 4))
        npt.assert_array_equal(forward(net, x), x)

    def test_matches_naive_matmul_oracle(self):
        rng = np.random.default_rng(7)
        net = random_net(rng, sizes=[3, 5, 4])
        x = rng.normal(size=(8, 3))
        # naive re-implementation: explicit loops
        expected = np.zeros((8, 4))
        for i in range(8):
            a = x[i]
            for layer in net.layers:
                z = np.array([layer.weights[r] @ a + layer.bias[r]
                              for r in range(layer.weights.shape[0])])
                a = np.maximum(z, 0) if layer.activation == RELU else z
            expected[i] = a
        npt.assert_allclose(forward(net, x), expected, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        net = random_net(np.random.default_rng(1), sizes=[3, 4, 2])
        with pytest.raises(ValueError):
            forward(net, np.zeros((2, 5)))

    def test_row_independence(self):
        # BLAS kernels differ across batch shapes, so equality is numerical,
        # not bitwise (bitwise determinism for identical inputs is tested
        # separately).
        rng = np.random.default_rng(5)
        net = random_net(rng, sizes=[4, 6, 3])
        x = rng.normal(size=(10, 4))
        full = forward(net, x)
        npt.assert_allclose(full[3:4], forward(net, x[3:4]), rtol=0, atol=1e-12)


class TestBackward:
    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(42)
        step = 1e-4
        for _ in range(20):
            net, x, y = gradcheck_case(rng)
            assert n_parameters(net) <= 500
            grads, _ = backward(net, x, y)
            analytic = np.concatenate([np.concatenate([gw.ravel(), gb.ravel()])
                                       for gw, gb in grads])
            flat = flatten_params(net)
            fd = np.empty_like(flat)
            for i in range(flat.size):
                for sign, slot in ((+1, 0), (-1, 1)):
                    probe = flat.copy()
                    probe[i] += sign * step
                    set_params(net, probe)
                    probs = predict_probs(net, x)
                    loss = float(np.mean(nncore.per_sample_losses(probs, y)))
                    if slot == 0:
                        up = loss
                    else:
                        down = loss
                fd[i] = (up - down) / (2 * step)
            set_params(net, flat)
            rel = np.linalg.norm(analytic - fd) / max(
                np.linalg.norm(analytic) + np.linalg.norm(fd), 1e-12)
            assert rel < 1e-4

    def test_duplicated_batch_gives_identical_gradients(self):
        rng = np.random.default_rng(9)
        net = random_net(rng, sizes=[3, 6, 4])
        x = rng.normal(size=(5, 3))
        y = rng.integers(0, 4, size=5)
        grads_once, loss_once = backward(net, x, y)
        grads_twice, loss_twice = backward(net, np.vstack([x, x]), np.concatenate([y, y]))
        assert loss_once == pytest.approx(loss_twice, abs=1e-14)
        for (gw1, gb1), (gw2, gb2) in zip(grads_once, grads_twice):
            npt.assert_allclose(gw1, gw2, rtol=0, atol=1e-14)
            npt.assert_allclose(gb1, gb2, rtol=0, atol=1e-14)

    def test_zero_logits_balanced_labels_zero_bias_gradient(self):
        # softmax(0) minus the empirical label frequency cancels exactly
        net = Network.fresh([Layer(np.zeros((4, 3)), np.zeros(4), IDENTITY)])
        x = np.random.default_rng(2).normal(size=(8, 3))
        y = np.array([0, 1, 2, 3] * 2)
        grads, _ = backward(net, x, y)
        npt.assert_allclose(grads[0][1], np.zeros(4), rtol=0, atol=1e-15)

    def test_empty_batch_rejected(self):
        net = random_net(np.random.default_rng(1), sizes=[3, 2])
        with pytest.raises(ValueError):
            backward(net, np.zeros((0, 3)), np.zeros(0, dtype=int))


class TestSgdStep:
    def cfg(self, momentum=0.9, weight_decay=0.0):
        return OptimizerConfig(lr0=0.1, momentum=momentum, weight_decay=weight_decay,
                               total_epochs=10, lr_decay_factor=10)

    def make(self, rng):
        net = random_net(rng, sizes=[2, 3, 2])
        grads = [(rng.normal(size=l.weights.shape), rng.normal(size=l.bias.shape))
                 for l in net.layers]
        return net, grads

    def test_zero_lr_updates_buffers_but_not_params(self):
        rng = np.random.default_rng(4)
        net, grads = self.make(rng)
        out = sgd_step(net, grads, 0.0, self.cfg())
        for before, after in zip(net.layers, out.layers):
            npt.assert_array_equal(before.weights, after.weights)
            npt.assert_array_equal(before.bias, after.bias)
        for (gw, _), vw in zip(grads, out.vel_w):
            npt.assert_array_equal(vw, gw)  # buffers started at zero

    def test_plain_gradient_descent(self):
        rng = np.random.default_rng(5)
        net, grads = self.make(rng)
        out = sgd_step(net, grads, 0.5, self.cfg(momentum=0.0, weight_decay=0.0))
        for before, after, (gw, gb) in zip(net.layers, out.layers, grads):
            npt.assert_allclose(after.weights, before.weights - 0.5 * gw, atol=1e-15)
            npt.assert_allclose(after.bias, before.bias - 0.5 * gb, atol=1e-15)

    def test_two_steps_momentum_displacement(self):
        # constant gradient g: displacement lr*g then lr*(0.9g + g)
        rng = np.random.default_rng(6)
        net, grads = self.make(rng)
        cfg = self.cfg(momentum=0.9, weight_decay=0.0)
        lr = 0.2
        stepped = sgd_step(sgd_step(net, grads, lr, cfg), grads, lr, cfg)
        for before, after, (gw, _) in zip(net.layers, stepped.layers, grads):
            npt.assert_allclose(after.weights, before.weights - lr * (gw + 1.9 * gw),
                                rtol=0, atol=1e-12)

    def test_weight_decay_coupled_into_buffer(self):
        rng = np.random.default_rng(7)
        net, grads = self.make(rng)
        out = sgd_step(net, grads, 0.1, self.cfg(momentum=0.0, weight_decay=0.5))
        for before, after, (gw, _) in zip(net.layers, out.layers, grads):
            expected = before.weights - 0.1 * (gw + 0.5 * before.weights)
            npt.assert_allclose(after.weights, expected, rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(8)
        net, grads = self.make(rng)
        grads[0] = (np.zeros((1, 1)), grads[0][1])
        with pytest.raises(ValueError):
            sgd_step(net, grads, 0.1, self.cfg())


class TestCosineLr:
    cfg = OptimizerConfig(lr0=0.02, momentum=0.9, weight_decay=5e-4,
                          total_epochs=300, lr_decay_factor=100.0)

    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, self.cfg) == pytest.approx(0.02, abs=1e-18)
        assert cosine_lr(300, self.cfg) == pytest.approx(0.0002, abs=1e-18)
        assert cosine_lr(150, self.cfg) == pytest.approx(0.0101, abs=1e-15)

    def test_nonincreasing(self):
        values = [cosine_lr(e, self.cfg) for e in range(301)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_epoch_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(-1, self.cfg)
        with pytest.raises(ValueError):
            cosine_lr(301, self.cfg)


class TestOptimizerConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(lr0=0.0), dict(lr0=-1.0), dict(lr0=0.1, momentum=1.0),
        dict(lr0=0.1, momentum=-0.1), dict(lr0=0.1, weight_decay=-1e-3),
        dict(lr0=0.1, total_epochs=-1), dict(lr0=0.1, lr_decay_factor=0.5),
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            OptimizerConfig(**kwargs)

    def test_zero_epochs_allowed_as_degenerate_case(self):
        assert OptimizerConfig(lr0=0.1, total_epochs=0).total_epochs == 0


class TestDeterminismAndValidation:
    def test_forward_backward_step_bit_identical(self):
        rng = np.random.default_rng(13)
        net = random_net(rng, sizes=[4, 8, 3])
        x = rng.normal(size=(16, 4))
        y = rng.integers(0, 3, size=16)
        cfg = OptimizerConfig(lr0=0.05, total_epochs=5, lr_decay_factor=10)
        out_a = forward(net, x)
        grads_a, loss_a = backward(net, x, y)
        step_a = sgd_step(net, grads_a, 0.05, cfg)
        out_b = forward(net, x)
        grads_b, loss_b = backward(net, x, y)
        step_b = sgd_step(net, grads_b, 0.05, cfg)
        npt.assert_array_equal(out_a, out_b)
        assert loss_a == loss_b
        for la, lb in zip(step_a.layers, step_b.layers):
            npt.assert_array_equal(la.weights, lb.weights)
            npt.assert_array_equal(la.bias, lb.bias)

    def test_network_invariants_enforced(self):
        with pytest.raises(ValueError):
            Network.fresh([Layer(np.zeros((3, 2)), np.zeros(3), RELU)])  # relu output
        with pytest.raises(ValueError):
            Network.fresh([Layer(np.zeros((3, 2)), np.zeros(3), IDENTITY),
                           Layer(np.zeros((2, 4)), np.zeros(2), IDENTITY)])  # no chain

    def test_init_network_bounds_and_zero_bias(self):
        net = init_network([10, 20, 5], np.random.default_rng(3))
        for layer in net.layers:
            fan_out, fan_in = layer.weights.shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            assert np.all(np.abs(layer.weights) <= limit)
            npt.assert_array_equal(layer.bias, np.zeros(fan_out))
            npt.assert_array_equal(net.vel_w[0], np.zeros_like(net.layers[0].weights))


class TestSnapshotIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        net = random_net(rng, sizes=[5, 7, 3])
        path = tmp_path / "net.bin"
        save_network(net, path)
        loaded = load_network(path)
        assert len(loaded.layers) == len(net.layers)
        for a, b in zip(net.layers, loaded.layers):
            npt.assert_array_equal(a.weights, b.weights)
            npt.assert_array_equal(a.bias, b.bias)
            assert a.activation == b.activation

    def test_truncated_file_rejected(self, tmp_path):
        rng = np.random.default_rng(22)
        net = random_net(rng, sizes=[4, 3])
        path = tmp_path / "net.bin"
        save_network(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-9])
        with pytest.raises(ValueError, match="truncated"):
            load_network(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "net.bin"
        path.write_bytes(b"NOTANET!" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_network(path)
