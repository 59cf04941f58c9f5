import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from balancekit import nnet, rl
from balancekit.nnet import MlpParams, MlpSpec
from balancekit.rl import (Net, PpoConfig, RolloutBuffer, clipped_objective,
                           compute_gae, mcn_loss, mcn_update, ppo_ratio,
                           ppo_update)


def brute_force_advantage(rewards, values, dones, gamma):
    """lambda = 1 oracle: discounted reward-to-go minus baseline, per episode."""
    T = len(rewards)
    adv = np.zeros(T)
    for t in range(T):
        total = 0.0
        disc = 1.0
        k = t
        while k < T:
            total += disc * rewards[k]
            if dones[k]:
                break
            disc *= gamma
            k += 1
        else:
            total += disc * gamma / gamma * 0  # unreachable; loops end on break or k == T
        if k == T:  # truncated: bootstrap with the appended value
            total += disc * gamma * values[T]
        adv[t] = total - values[t]
    return adv


class TestGae:
    def test_single_terminal_step(self):
        adv, ret = compute_gae([2.0], [0.5, 99.0], [1.0], 0.99, 0.95)
        assert adv[0] == pytest.approx(2.0 - 0.5)
        assert ret[0] == pytest.approx(2.0)

    def test_lambda_zero_is_td_residual(self):
        r = np.array([1.0, 2.0, 3.0])
        v = np.array([0.3, 0.6, 0.9, 1.2])
        d = np.zeros(3)
        adv, _ = compute_gae(r, v, d, 0.9, 0.0)
        expect = r + 0.9 * v[1:] - v[:-1]
        assert np.allclose(adv, expect)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_lambda_one_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 21))
        r = rng.normal(size=T)
        v = rng.normal(size=T + 1)
        d = (rng.random(T) < 0.25).astype(float)
        d[-1] = 1.0  # episodic
        gamma = 0.97
        adv, ret = compute_gae(r, v, d, gamma, 1.0)
        expect = brute_force_advantage(r, v, d, gamma)
        assert np.allclose(adv, expect, atol=1e-10)
        assert np.allclose(ret, adv + v[:-1], atol=1e-12)

    def test_misaligned_raises(self):
        with pytest.raises(ValueError):
            compute_gae([1.0], [0.0], [1.0], 0.99, 0.95)


class TestRatioAndClip:
    def test_equal_log_probs(self):
        assert ppo_ratio(1.7, 1.7) == pytest.approx(1.0)

    def test_log_two(self):
        assert ppo_ratio(math.log(2.0), 0.0) == pytest.approx(2.0, rel=1e-12)

    def test_minus_half(self):
        assert ppo_ratio(0.0, 0.5) == pytest.approx(math.exp(-0.5), rel=1e-12)
        assert ppo_ratio(0.0, 0.5) == pytest.approx(0.60653, abs=1e-5)

    def test_unclipped_at_unit_ratio(self):
        assert clipped_objective(1.0, -3.7, 0.2) == pytest.approx(-3.7)

    def test_clip_above(self):
        assert clipped_objective(1.3, 1.0, 0.2) == pytest.approx(1.2)

    def test_clip_below_negative_advantage(self):
        assert clipped_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8)

    @given(st.floats(0.01, 5.0), st.floats(-5, 5))
    def test_pessimistic_bound(self, p, a):
        assert clipped_objective(p, a, 0.2) <= p * a + 1e-12

    @given(st.floats(-3, 3), st.floats(-5, 5))
    def test_ratio_of_same_is_one(self, lp, a):
        assert clipped_objective(ppo_ratio(lp, lp), a, 0.2) == pytest.approx(a)


def _constant_obs_buffer(policy, value, reward_fn, rng, size):
    obs = np.zeros((size, policy.spec.n_in))
    mean = nnet.forward(policy.spec, policy.params, obs)
    eps = rng.standard_normal((size, policy.spec.n_out))
    actions = mean + np.exp(policy.params.log_std) * eps
    lps = nnet.gaussian_log_prob(actions, mean, policy.params.log_std)
    rewards = reward_fn(actions)
    values = nnet.forward(value.spec, value.params, obs)[:, 0]
    return RolloutBuffer(obs=obs, actions=actions, rewards=rewards,
                         log_probs=lps, values=np.append(values, 0.0),
                         dones=np.ones(size))


class TestPpoUpdate:
    def test_zero_advantages_leave_policy_unchanged(self):
        rng = np.random.default_rng(5)
        cfg = PpoConfig(lr=1e-3, buffer_size=128, batch_size=32, epochs=4)
        policy = Net.create(MlpSpec((2, 8, 1), "gaussian"), rng, cfg.lr)
        value = Net.create(MlpSpec((2, 8, 1)), rng, cfg.lr)
        # constant reward and terminal steps: r - V has zero variance after
        # value fit; force it exactly by making rewards equal values
        obs = rng.normal(size=(128, 2))
        mean = nnet.forward(policy.spec, policy.params, obs)
        actions = mean + 0.05 * rng.standard_normal((128, 1))
        lps = nnet.gaussian_log_prob(actions, mean, policy.params.log_std)
        values = nnet.forward(value.spec, value.params, obs)[:, 0]
        buf = RolloutBuffer(obs=obs, actions=actions, rewards=values.copy(),
                            log_probs=lps, values=np.append(values, 0.0),
                            dones=np.ones(128))
        before = policy.params.flat.copy()
        metrics = ppo_update(buf, policy, value, cfg, rng)
        assert not metrics["aborted"]
        assert np.array_equal(policy.params.flat, before)

    def test_gaussian_bandit_converges(self):
        rng = np.random.default_rng(0)
        cfg = PpoConfig(lr=1e-3, buffer_size=256, batch_size=64, epochs=10)
        policy = Net.create(MlpSpec((1, 8, 1), "gaussian"), rng, cfg.lr,
                            log_std_init=math.log(0.3))
        value = Net.create(MlpSpec((1, 8, 1)), rng, cfg.lr)
        for _ in range(200):
            buf = _constant_obs_buffer(
                policy, value, lambda a: -(a[:, 0] - 0.7) ** 2, rng, 256)
            ppo_update(buf, policy, value, cfg, rng)
        mean = nnet.forward(policy.spec, policy.params, np.zeros(1))[0]
        assert abs(mean - 0.7) < 0.05

    def test_clip_fraction_in_unit_interval(self):
        rng = np.random.default_rng(1)
        cfg = PpoConfig(lr=1e-3, buffer_size=64, batch_size=32, epochs=2)
        policy = Net.create(MlpSpec((3, 8, 2), "gaussian"), rng, cfg.lr)
        value = Net.create(MlpSpec((3, 8, 1)), rng, cfg.lr)
        obs = rng.normal(size=(64, 3))
        mean = nnet.forward(policy.spec, policy.params, obs)
        actions = mean + 0.05 * rng.standard_normal((64, 2))
        buf = RolloutBuffer(
            obs=obs, actions=actions,
            rewards=rng.normal(size=64),
            log_probs=nnet.gaussian_log_prob(actions, mean, policy.params.log_std),
            values=np.append(nnet.forward(value.spec, value.params, obs)[:, 0], 0.0),
            dones=(rng.random(64) < 0.1).astype(float))
        m = ppo_update(buf, policy, value, cfg, rng)
        assert 0.0 <= m["clip_fraction"] <= 1.0
        assert np.isfinite(m["approx_kl"])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_gradient_aborts_and_rolls_back(self):
        rng = np.random.default_rng(2)
        cfg = PpoConfig(lr=1e-3, buffer_size=32, batch_size=32, epochs=1)
        policy = Net.create(MlpSpec((1, 4, 1), "gaussian"), rng, cfg.lr)
        value = Net.create(MlpSpec((1, 4, 1)), rng, cfg.lr)
        obs = np.zeros((32, 1))
        mean = nnet.forward(policy.spec, policy.params, obs)
        actions = mean + 0.1 * rng.standard_normal((32, 1))
        buf = RolloutBuffer(
            obs=obs, actions=actions,
            rewards=np.full(32, np.inf),
            log_probs=nnet.gaussian_log_prob(actions, mean, policy.params.log_std),
            values=np.append(np.zeros(32), 0.0), dones=np.ones(32))
        before = policy.params.flat.copy()
        m = ppo_update(buf, policy, value, cfg, rng)
        assert m["aborted"]
        assert np.array_equal(policy.params.flat, before)


class TestMcn:
    def _fixture(self, rng, n=64, n_m=4, n_act=2):
        R_act = rng.normal(scale=0.05, size=(n_act, n_m))
        k1 = rng.uniform(500, 2000, size=(n, n_m))
        tau0 = rng.normal(scale=2.0, size=(n, n_act))
        return R_act, k1, tau0

    def test_exact_fit_zero_loss(self, rng):
        R_act, k1, tau0 = self._fixture(rng)
        a = rng.uniform(0, 1, size=(64, 4))
        tau_d = (k1 * a) @ R_act.T + tau0
        loss, grad = mcn_loss(tau_d, a, k1, tau0, R_act, w_reg=0.0)
        assert loss == pytest.approx(0.0, abs=1e-18)
        assert np.allclose(grad, 0.0)

    def test_zero_activation_residual(self, rng):
        R_act, k1, tau0 = self._fixture(rng)
        tau_d = rng.normal(size=(64, 2))
        a = np.zeros((64, 4))
        loss, _ = mcn_loss(tau_d, a, k1, tau0, R_act, w_reg=0.0)
        expect = float(((tau_d - tau0) ** 2).sum()) / 64
        assert loss == pytest.approx(expect, rel=1e-12)

    def test_nonnegative(self, rng):
        R_act, k1, tau0 = self._fixture(rng)
        for _ in range(20):
            a = rng.uniform(0, 1, size=(64, 4))
            tau_d = rng.normal(scale=10, size=(64, 2))
            loss, _ = mcn_loss(tau_d, a, k1, tau0, R_act, w_reg=0.01)
            assert loss >= 0.0

    def test_gradient_through_network_matches_fd(self, rng):
        R_act, k1, tau0 = self._fixture(rng, n=8)
        tau_d = rng.normal(scale=5.0, size=(8, 2))
        spec = MlpSpec((3, 10, 4), output_head="bounded01")
        params = nnet.init_params(spec, rng, out_gain=1.0)
        x = rng.normal(size=(8, 3))

        def loss_of(flat):
            a = nnet.forward(spec, MlpParams(spec, flat), x)
            return mcn_loss(tau_d, a, k1, tau0, R_act, 0.01)[0]

        a, cache = nnet.forward_cached(spec, params, x)
        _, dl_da = mcn_loss(tau_d, a, k1, tau0, R_act, 0.01)
        grad = nnet.backward(spec, params, cache, dl_da)
        h = 1e-6
        g_fd = np.zeros_like(grad)
        for i in range(len(grad)):
            fp = params.flat.copy(); fp[i] += h
            fm = params.flat.copy(); fm[i] -= h
            g_fd[i] = (loss_of(fp) - loss_of(fm)) / (2 * h)
        denom = max(np.linalg.norm(g_fd), 1e-12)
        assert np.linalg.norm(grad - g_fd) / denom < 1e-4

    def test_training_curve_ten_fold_decrease(self):
        rng = np.random.default_rng(3)
        R_act, k1, tau0 = self._fixture(rng, n=256)
        a_true = rng.uniform(0.2, 0.8, size=(256, 4))
        tau_d = (k1 * a_true) @ R_act.T + tau0
        inputs = np.hstack([tau_d, k1 / 1000.0])
        spec = MlpSpec((6, 32, 4), output_head="bounded01")
        mcn = Net.create(spec, rng, lr=1e-3, out_gain=1.0)
        loss0 = None
        for step in range(500):
            m = mcn_update(inputs, tau_d, k1, tau0, R_act, mcn, w_reg=0.0)
            if step == 0:
                loss0 = m["loss"]
        final = mcn_update(inputs, tau_d, k1, tau0, R_act, mcn, w_reg=0.0)["loss"]
        assert final <= loss0 / 10.0

    def test_loss_strictly_decreases_first_50_steps(self):
        rng = np.random.default_rng(4)
        R_act, k1, tau0 = self._fixture(rng, n=128)
        a_true = rng.uniform(0.2, 0.8, size=(128, 4))
        tau_d = (k1 * a_true) @ R_act.T + tau0
        inputs = np.hstack([tau_d, k1 / 1000.0])
        spec = MlpSpec((6, 32, 4), output_head="bounded01")
        mcn = Net.create(spec, rng, lr=1e-3, out_gain=1.0)
        losses = [mcn_update(inputs, tau_d, k1, tau0, R_act, mcn, w_reg=0.0)["loss"]
                  for _ in range(51)]
        assert all(b < a for a, b in zip(losses[:50], losses[1:51]))

    def test_large_regularization_suppresses_activations(self):
        rng = np.random.default_rng(6)
        R_act, k1, tau0 = self._fixture(rng, n=128)
        tau_d = rng.normal(scale=5.0, size=(128, 2))
        inputs = np.hstack([tau_d, k1 / 1000.0])
        spec = MlpSpec((6, 32, 4), output_head="bounded01")
        mcn = Net.create(spec, rng, lr=3e-3, out_gain=1.0)
        for _ in range(600):
            mcn_update(inputs, tau_d, k1, tau0, R_act, mcn, w_reg=1e3)
        a = nnet.forward(spec, mcn.params, inputs)
        assert np.all((a >= 0) & (a <= 1))
        assert a.mean() < 0.05
