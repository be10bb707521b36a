import math

import numpy as np
import pytest

from helpers import fd_grad, rel_error
from spu.nets import (AdamState, CategoricalPolicyNet, GaussianPolicyNet, Mlp,
                      ValueNet, adam_step, grad_kl, grad_log_prob, grad_ratio,
                      grad_value_mse, kl_between, load_params, log_prob,
                      save_params)
from spu.solvers import kl_categorical


def small_categorical(seed=0, state_dim=5, n_actions=3):
    return CategoricalPolicyNet(state_dim, n_actions, hidden=(8, 8), seed=seed)


def small_gaussian(seed=0, state_dim=5, action_dim=2):
    return GaussianPolicyNet(state_dim, action_dim, hidden=(8, 8), seed=seed)


class TestForward:
    def test_zero_weights_categorical_uniform(self):
        net = small_categorical(n_actions=4)
        net.set_params(np.zeros(net.n_params))
        probs = net.forward(np.ones(5))
        assert probs == pytest.approx(np.full(4, 0.25), abs=1e-15)

    def test_zero_weights_gaussian(self):
        net = small_gaussian()
        net.set_params(np.zeros(net.n_params))
        mean, std = net.forward(np.ones(5))
        assert mean == pytest.approx(np.zeros(2), abs=1e-15)
        assert std == pytest.approx(np.ones(2), abs=1e-15)

    def test_matches_hand_rolled_reference(self):
        net = small_categorical(seed=3)
        x = np.random.default_rng(1).normal(size=5)
        # independent forward pass straight from the weight matrices
        h = x.copy()
        for i, (w, b) in enumerate(zip(net.trunk.weights, net.trunk.biases)):
            h = h @ w + b
            if i < len(net.trunk.weights) - 1:
                h = np.tanh(h)
        ref = np.exp(h - h.max())
        ref = ref / ref.sum()
        assert net.forward(x) == pytest.approx(ref, abs=1e-14)

    def test_dimension_mismatch(self):
        net = small_categorical()
        with pytest.raises(ValueError, match="shape"):
            net.forward(np.ones(7))

    def test_softmax_invariant_to_logit_shift(self):
        net = small_categorical(seed=5)
        x = np.ones(5)
        before = net.forward(x)
        net.trunk.biases[-1] = net.trunk.biases[-1] + 11.5  # shift every logit
        assert net.forward(x) == pytest.approx(before, abs=1e-12)

    def test_init_reproducible(self):
        a = small_categorical(seed=42)
        b = small_categorical(seed=42)
        assert np.array_equal(a.get_params(), b.get_params())
        c = small_categorical(seed=43)
        assert not np.array_equal(a.get_params(), c.get_params())


class TestLogProb:
    def test_uniform_categorical(self):
        net = CategoricalPolicyNet(3, 4, hidden=(8,), seed=0)
        net.set_params(np.zeros(net.n_params))
        assert log_prob(net, np.zeros(3), 2) == pytest.approx(math.log(0.25), abs=1e-15)

    def test_standard_normal_at_zero(self):
        net = GaussianPolicyNet(3, 1, hidden=(8,), seed=0)
        net.set_params(np.zeros(net.n_params))
        assert log_prob(net, np.zeros(3), np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
        assert log_prob(net, np.zeros(3), np.zeros(1)) == pytest.approx(-0.91894, abs=5e-6)

    def test_categorical_normalization(self):
        net = small_categorical(seed=9, n_actions=8)
        x = np.random.default_rng(0).normal(size=5)
        total = sum(math.exp(log_prob(net, x, a)) for a in range(8))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_action_out_of_range(self):
        net = small_categorical()
        with pytest.raises(ValueError, match="out of range"):
            log_prob(net, np.zeros(5), 3)


class TestKlBetween:
    def test_identical_parameters(self):
        net = small_categorical(seed=1)
        assert kl_between(net, net.clone(), np.ones(5)) == pytest.approx(0.0, abs=1e-15)

    def test_unit_gaussians(self):
        a = GaussianPolicyNet(2, 1, hidden=(4,), seed=0)
        b = GaussianPolicyNet(2, 1, hidden=(4,), seed=0)
        a.set_params(np.zeros(a.n_params))
        b.set_params(np.zeros(b.n_params))
        # shift a's output bias so mean = 1 while b keeps mean = 0
        a.trunk.biases[-1] = np.array([1.0])
        assert kl_between(a, b, np.zeros(2)) == pytest.approx(0.5, abs=1e-15)

    def test_matches_kl_categorical(self):
        a, b = small_categorical(seed=2), small_categorical(seed=7)
        x = np.random.default_rng(5).normal(size=5)
        direct = kl_categorical(a.forward(x), b.forward(x))
        assert kl_between(a, b, x) == pytest.approx(direct, abs=1e-12)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(3)
        for seed in range(10):
            a, b = small_gaussian(seed=seed), small_gaussian(seed=seed + 100)
            x = rng.normal(size=5)
            assert kl_between(a, b, x) >= 0.0

    def test_head_mismatch(self):
        with pytest.raises(ValueError, match="heads"):
            kl_between(small_categorical(), small_gaussian(), np.zeros(5))


class TestGradients:
    @pytest.mark.parametrize("make_net,make_action", [
        (small_categorical, lambda rng: int(rng.integers(3))),
        (small_gaussian, lambda rng: rng.normal(size=2)),
    ])
    def test_grad_log_prob_finite_difference(self, make_net, make_action):
        rng = np.random.default_rng(0)
        for seed in range(8):
            net = make_net(seed=seed)
            x = rng.normal(size=5)
            action = make_action(rng)
            g = grad_log_prob(net, x, action)

            def f(theta, net=net, x=x, action=action):
                probe = net.clone()
                probe.set_params(theta)
                return log_prob(probe, x, action)

            assert rel_error(fd_grad(f, net.get_params()), g) < 1e-4

    @pytest.mark.parametrize("make_net", [small_categorical, small_gaussian])
    def test_grad_kl_finite_difference(self, make_net):
        rng = np.random.default_rng(1)
        for seed in range(6):
            net, ref = make_net(seed=seed), make_net(seed=seed + 50)
            x = rng.normal(size=5)
            g = grad_kl(net, ref, x)

            def f(theta, net=net, ref=ref, x=x):
                probe = net.clone()
                probe.set_params(theta)
                return kl_between(probe, ref, x)

            assert rel_error(fd_grad(f, net.get_params()), g) < 1e-4

    @pytest.mark.parametrize("make_net,make_action", [
        (small_categorical, lambda rng: int(rng.integers(3))),
        (small_gaussian, lambda rng: rng.normal(size=2)),
    ])
    def test_grad_ratio_finite_difference(self, make_net, make_action):
        rng = np.random.default_rng(2)
        for seed in range(6):
            net, ref = make_net(seed=seed), make_net(seed=seed + 31)
            x = rng.normal(size=5)
            action = make_action(rng)
            g = grad_ratio(net, ref, x, action)

            def f(theta, net=net, ref=ref, x=x, action=action):
                probe = net.clone()
                probe.set_params(theta)
                return math.exp(log_prob(probe, x, action) - log_prob(ref, x, action))

            assert rel_error(fd_grad(f, net.get_params()), g) < 1e-4

    def test_grad_kl_zero_at_equality(self):
        net = small_categorical(seed=11)
        g = grad_kl(net, net.clone(), np.random.default_rng(0).normal(size=5))
        assert np.max(np.abs(g)) < 1e-8

    def test_value_mse_grad_matches_reference(self):
        net = ValueNet(4, hidden=(8, 8), seed=0)
        x = np.random.default_rng(7).normal(size=4)
        target = 1.7
        g = grad_value_mse(net, x, target)

        # independent reference: chain rule with a one-weight-at-a-time backprop
        v = net.forward(x)
        dv = fd_grad(lambda th: _value_of(net, th, x), net.get_params())
        assert rel_error(g, 2.0 * (v - target) * dv) < 1e-4

    def test_value_mse_finite_difference(self):
        rng = np.random.default_rng(8)
        for seed in range(6):
            net = ValueNet(4, hidden=(8, 8), seed=seed)
            x = rng.normal(size=4)
            target = float(rng.normal())
            g = grad_value_mse(net, x, target)

            def f(theta, net=net, x=x, target=target):
                probe = net.clone()
                probe.set_params(theta)
                return (probe.forward(x) - target) ** 2

            assert rel_error(fd_grad(f, net.get_params()), g) < 1e-4


def _value_of(net, theta, x):
    probe = net.clone()
    probe.set_params(theta)
    return probe.forward(x)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = np.array([1.0, -2.0, 3.0])
        state = AdamState.init(3, alpha=0.1)
        new_params, new_state = adam_step(params, np.zeros(3), state)
        assert np.array_equal(new_params, params)
        assert new_state.step == 1

    def test_first_step_magnitude_is_alpha(self):
        for scale in (1e-3, 1.0, 1e4):
            params = np.zeros(4)
            state = AdamState.init(4, alpha=0.01)
            g = scale * np.array([1.0, -1.0, 2.0, -0.5])
            new_params, _ = adam_step(params, g, state)
            # bias-corrected first step is -alpha * g / (|g| + eps)
            assert np.abs(new_params) == pytest.approx(np.full(4, 0.01), rel=1e-4)
            assert np.all(np.sign(new_params) == -np.sign(g))

    def test_deterministic_trajectory(self):
        def run():
            rng = np.random.default_rng(0)
            params = rng.normal(size=6)
            state = AdamState.init(6, alpha=0.05)
            for _ in range(25):
                params, state = adam_step(params, rng.normal(size=6), state)
            return params

        assert np.array_equal(run(), run())

    def test_nonfinite_gradient_raises(self):
        state = AdamState.init(2)
        with pytest.raises(FloatingPointError):
            adam_step(np.zeros(2), np.array([np.nan, 0.0]), state)

    def test_lr_scale_zero_freezes(self):
        params = np.array([1.0, 2.0])
        state = AdamState.init(2, alpha=0.1)
        new_params, _ = adam_step(params, np.array([3.0, -4.0]), state, lr_scale=0.0)
        assert np.array_equal(new_params, params)


class TestCheckpoint:
    @pytest.mark.parametrize("make_net", [small_categorical, small_gaussian,
                                          lambda: ValueNet(5, hidden=(8, 8), seed=4)])
    def test_round_trip(self, tmp_path, make_net):
        net = make_net()
        path = tmp_path / "ckpt.bin"
        save_params(net, str(path))
        other = net.clone()
        other.set_params(np.zeros(other.n_params))
        load_params(other, str(path))
        assert np.array_equal(other.get_params(), net.get_params())

    def test_header_mismatch(self, tmp_path):
        net = small_categorical()
        path = tmp_path / "ckpt.bin"
        save_params(net, str(path))
        wrong = CategoricalPolicyNet(5, 3, hidden=(8, 4), seed=0)
        with pytest.raises(ValueError, match="header"):
            load_params(wrong, str(path))


class TestMlp:
    def test_param_count(self):
        net = Mlp([3, 8, 2], np.random.default_rng(0))
        assert net.n_params == (3 + 1) * 8 + (8 + 1) * 2

    def test_finite_output(self):
        net = Mlp([3, 16, 16, 2], np.random.default_rng(0))
        out, _ = net.forward(np.random.default_rng(1).normal(size=(10, 3)) * 100)
        assert np.all(np.isfinite(out))
