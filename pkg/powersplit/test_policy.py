"""
Tests for the MLP policy: gradients, losses, advantage estimation, optimizer, checkpoints
"""

import json
import math

import numpy as np
import pytest

from services.errors import ConfigError
from services.policy_service import (
    Adam, Mlp, MlpPolicy, PpoBatch, Trajectory, bc_loss, clip_grad_norm, compute_gae,
    concatenate, forward, gaussian_log_prob, load_checkpoint, policy_from_dict, policy_to_dict,
    ppo_loss, save_checkpoint,
)


def numeric_gradients(policy, loss_fn, h=1e-6):
    """Central differences of ``loss_fn()`` w.r.t. every policy parameter."""
    grads = []
    for param in policy.parameters():
        grad = np.zeros_like(param)
        flat, flat_grad = param.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = loss_fn()
            flat[i] = saved - h
            down = loss_fn()
            flat[i] = saved
            flat_grad[i] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def assert_gradients_close(analytic, numeric):
    assert len(analytic) == len(numeric)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-7)


class TestMlp:

    def test_forward_shapes(self):
        policy = MlpPolicy.create(n_inputs=7, n_actions=2, hidden=(8, 8), seed=1)
        mean, log_std = forward(policy, np.zeros(7))
        assert mean.shape == (2,) and log_std.shape == (2,)
        assert np.all(np.abs(mean) <= 1.0)
        np.testing.assert_array_equal(log_std, [-1.0, -1.0])

    def test_wrong_state_size(self):
        policy = MlpPolicy.create(n_inputs=7, hidden=(4,))
        with pytest.raises(ConfigError):
            forward(policy, np.zeros(5))

    def test_seeded_creation(self):
        a = MlpPolicy.create(hidden=(8,), seed=3)
        b = MlpPolicy.create(hidden=(8,), seed=3)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_layer_mismatch(self):
        with pytest.raises(ConfigError):
            Mlp([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])
        with pytest.raises(ConfigError):
            Mlp([np.zeros((4, 3))], [np.zeros(4)], output='softmax')

    def test_critic_must_match_actor(self):
        rng = np.random.default_rng(0)
        actor = Mlp.initialize([3, 4, 2], rng, output='tanh')
        critic = Mlp.initialize([5, 4, 1], rng)
        with pytest.raises(ConfigError):
            MlpPolicy(actor, critic, np.zeros(2))

    def test_act_is_reproducible(self):
        policy = MlpPolicy.create(hidden=(8,), seed=2)
        obs = np.linspace(-1.0, 1.0, 7)
        first = policy.act(obs, np.random.default_rng(9))
        second = policy.act(obs, np.random.default_rng(9))
        np.testing.assert_array_equal(first[0], second[0])
        assert first[1] == second[1] and first[2] == second[2]

    def test_copy_is_independent(self):
        policy = MlpPolicy.create(hidden=(4,), seed=0)
        clone = policy.copy()
        clone.actor.weights[0] += 1.0
        assert not np.array_equal(clone.actor.weights[0], policy.actor.weights[0])


class TestGradients:
    """Hand-written backward passes against central differences"""

    def setup_method(self):
        self.rng = np.random.default_rng(12)
        self.policy = MlpPolicy.create(n_inputs=2, n_actions=2, hidden=(2,), seed=4,
                                       init_log_std=-0.5)
        # larger output weights so tanh is not near-linear
        self.policy.actor.weights[-1] *= 50.0
        self.states = self.rng.uniform(-1.0, 1.0, (6, 2))

    def test_bc_gradient(self):
        actions = self.rng.uniform(-0.8, 0.8, (6, 2))
        loss, grads = bc_loss(self.policy, self.states, actions)
        numeric = numeric_gradients(self.policy, lambda: bc_loss(self.policy, self.states, actions)[0])
        assert_gradients_close(grads, numeric)
        assert loss > 0.0
        assert all(np.all(g == 0.0) for g in grads[self.policy.n_actor_params():])

    def test_ppo_gradient(self):
        mean, _ = self.policy.actor.forward(self.states)
        actions = mean + 0.3 * self.rng.standard_normal(mean.shape)
        current = gaussian_log_prob(actions, mean, self.policy.log_std)
        batch = PpoBatch(observations=self.states, actions=actions,
                         log_probs=current + self.rng.uniform(-0.5, 0.5, 6),
                         advantages=self.rng.normal(0.0, 1.0, 6),
                         returns=self.rng.normal(0.0, 1.0, 6))

        def loss_fn():
            return ppo_loss(self.policy, batch, clip_eps=0.2, value_coef=0.5, entropy_coef=0.01)[0]

        _, grads, _ = ppo_loss(self.policy, batch, clip_eps=0.2, value_coef=0.5, entropy_coef=0.01)
        assert_gradients_close(grads, numeric_gradients(self.policy, loss_fn))

    def test_ppo_stats_at_old_policy(self):
        mean, _ = self.policy.actor.forward(self.states)
        actions = mean + 0.1
        batch = PpoBatch(self.states, actions, gaussian_log_prob(actions, mean, self.policy.log_std),
                         np.ones(6), np.zeros(6))
        _, _, stats = ppo_loss(self.policy, batch, clip_eps=0.2)
        assert stats['approx_kl'] == pytest.approx(0.0, abs=1e-12)
        assert stats['clip_fraction'] == 0.0
        assert stats['policy_loss'] == pytest.approx(-1.0)


class TestAdvantages:

    def test_monte_carlo_returns(self):
        adv, ret = compute_gae([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [False, False, True],
                               gamma=1.0, lam=1.0)
        np.testing.assert_allclose(adv, [3.0, 2.0, 1.0])
        np.testing.assert_allclose(ret, [3.0, 2.0, 1.0])

    def test_one_step_td(self):
        adv, ret = compute_gae([1.0, 2.0], [0.5, 1.0], [False, False], last_value=4.0,
                               gamma=0.5, lam=0.0)
        np.testing.assert_allclose(adv, [1.0 + 0.5 * 1.0 - 0.5, 2.0 + 0.5 * 4.0 - 1.0])
        np.testing.assert_allclose(ret, adv + np.array([0.5, 1.0]))

    def test_episode_boundary_cuts_bootstrap(self):
        adv, _ = compute_gae([1.0, 1.0], [0.0, 0.0], [True, False], last_value=10.0,
                             gamma=1.0, lam=1.0)
        np.testing.assert_allclose(adv, [1.0, 11.0])

    def test_log_prob(self):
        logp = gaussian_log_prob(np.array([[1.0]]), np.array([[0.0]]), np.array([0.0]))
        assert logp[0] == pytest.approx(-0.5 - 0.5 * math.log(2.0 * math.pi))


class TestOptimization:

    def test_clip_grad_norm(self):
        grads = [np.array([3.0]), np.array([4.0])]
        norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(np.concatenate(grads), [0.6, 0.8])

    def test_clip_grad_norm_below_limit(self):
        grads = [np.array([0.3, 0.4])]
        assert clip_grad_norm(grads, 1.0) == pytest.approx(0.5)
        np.testing.assert_array_equal(grads[0], [0.3, 0.4])

    def test_adam_minimizes_quadratic(self):
        p = np.array([0.0, 10.0])
        optimizer = Adam([p], lr=0.05)
        for _ in range(3000):
            optimizer.step([2.0 * (p - np.array([3.0, -1.0]))])
        np.testing.assert_allclose(p, [3.0, -1.0], atol=1e-2)

    def test_adam_rejects_bad_rate(self):
        with pytest.raises(ConfigError):
            Adam([np.zeros(1)], lr=0.0)


class TestTrajectory:

    def test_default_done_flags(self):
        trajectory = Trajectory(np.zeros((3, 7)), np.zeros((3, 2)), np.zeros(3))
        np.testing.assert_array_equal(trajectory.dones, [False, False, True])
        assert len(trajectory) == 3

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            Trajectory(np.zeros((3, 7)), np.zeros((2, 2)), np.zeros(3))

    def test_concatenate(self):
        a = Trajectory(np.zeros((2, 7)), np.zeros((2, 2)), [1.0, 2.0])
        b = Trajectory(np.ones((3, 7)), np.ones((3, 2)), [3.0, 4.0, 5.0], log_probs=np.zeros(3))
        joined = concatenate([a, b])
        assert len(joined) == 5
        np.testing.assert_array_equal(joined.dones, [False, True, False, False, True])
        assert joined.log_probs is None
        with pytest.raises(ConfigError):
            concatenate([])


class TestCheckpoints:
    """JSON checkpoint layout and restore"""

    def setup_method(self):
        self.policy = MlpPolicy.create(hidden=(8, 8), seed=6)
        self.obs = np.random.default_rng(1).uniform(-1.0, 1.0, (5, 7))

    def test_round_trip_is_exact(self, tmp_path):
        path = tmp_path / "policy.json"
        save_checkpoint(self.policy, path, {'seed': 6})
        restored = load_checkpoint(path)
        before, _ = self.policy.actor.forward(self.obs)
        after, _ = restored.actor.forward(self.obs)
        np.testing.assert_array_equal(before, after)
        np.testing.assert_array_equal(self.policy.value(self.obs), restored.value(self.obs))
        assert json.loads(path.read_text())['metadata'] == {'seed': 6}

    def test_layout(self):
        data = policy_to_dict(self.policy)
        assert data['n_inputs'] == 7 and data['n_actions'] == 2
        first = data['actor']['layers'][0]
        assert first['shape'] == [8, 7]
        assert len(first['weights']) == 56
        assert data['actor']['output'] == 'tanh'

    def test_rejects_foreign_format(self):
        data = policy_to_dict(self.policy)
        data['format'] = 'something-else'
        with pytest.raises(ConfigError):
            policy_from_dict(data)
        data = policy_to_dict(self.policy)
        data['version'] = 99
        with pytest.raises(ConfigError):
            policy_from_dict(data)

    def test_missing_or_corrupt_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "absent.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        with pytest.raises(ConfigError):
            load_checkpoint(broken)
