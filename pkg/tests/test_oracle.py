"""Enumeration ground truth and estimator expectation checks."""

import numpy as np
import pytest

from greensim_rl.core import rollout_batch, trajectory_return
from greensim_rl.harness import evaluate_policy
from greensim_rl.oracle import (
    TabularEnv,
    TabularMDP,
    enumerate_trajectories,
    estimator_exact_expectation,
    exact_expected_return,
    exact_policy_gradient,
    run_oracle_checks,
)
from greensim_rl.policy import LinearSoftmaxPolicy, onehot_features

from conftest import random_tensor, stream


def one_state_bandit(r0=1.0, r1=0.0):
    return TabularMDP(
        transition=np.ones((1, 2, 1)),
        rewards=np.array([[r0, r1]]),
        initial=np.array([1.0]),
        horizon=2,
    )


class TestEnumeration:
    def test_single_path(self):
        mdp = TabularMDP(
            transition=np.ones((1, 1, 1)),
            rewards=np.array([[2.0]]),
            initial=np.array([1.0]),
            horizon=2,
        )
        policy = LinearSoftmaxPolicy(onehot_features(1), 1)
        enum = enumerate_trajectories(mdp, np.zeros(1), policy)
        assert len(enum) == 1
        assert enum[0][1] == pytest.approx(1.0)

    def test_uniform_counting(self, tab_policy):
        mdp = TabularMDP(
            transition=np.full((2, 2, 2), 0.5),
            rewards=np.zeros((2, 2)),
            initial=np.array([0.5, 0.5]),
            horizon=2,
        )
        enum = enumerate_trajectories(mdp, np.zeros(4), tab_policy)
        assert len(enum) == 8
        for _, prob in enum:
            assert prob == pytest.approx(1.0 / 8.0, abs=1e-15)

    def test_probabilities_sum_to_one(self, toy_mdp, tab_policy, rng):
        theta = 0.4 * rng.standard_normal(4)
        enum = enumerate_trajectories(toy_mdp, theta, tab_policy)
        assert sum(p for _, p in enum) == pytest.approx(1.0, abs=1e-10)

    def test_rewards_recorded(self, toy_mdp, tab_policy):
        enum = enumerate_trajectories(toy_mdp, np.zeros(4), tab_policy)
        traj, _ = enum[0]
        for t in range(traj.n_steps):
            s, a = int(traj.states[t, 0]), int(traj.actions[t])
            assert traj.rewards[t] == toy_mdp.rewards[s, a]


class TestExactExpectedReturn:
    def test_constant_reward(self, tab_policy):
        mdp = TabularMDP(
            transition=np.full((2, 2, 2), 0.5),
            rewards=np.full((2, 2), 3.0),
            initial=np.array([1.0, 0.0]),
            horizon=3,
        )
        assert exact_expected_return(mdp, np.zeros(4), 1.0, tab_policy) == pytest.approx(6.0)

    def test_bandit_uniform_policy(self):
        policy = LinearSoftmaxPolicy(onehot_features(1), 2)
        assert exact_expected_return(one_state_bandit(), np.zeros(2), 1.0, policy) == pytest.approx(0.5)

    def test_monte_carlo_cross_check(self, toy_mdp, tab_policy, rng):
        theta = 0.4 * rng.standard_normal(4)
        exact = exact_expected_return(toy_mdp, theta, 0.9, tab_policy)
        env = TabularEnv(toy_mdp)
        trajs = rollout_batch(env, tab_policy, theta, toy_mdp.transition, 1_000_000, stream(40))
        returns = np.array([trajectory_return(t, 0.9) for t in trajs])
        se = returns.std() / np.sqrt(returns.size)
        assert abs(returns.mean() - exact) < 4 * se


class TestExactPolicyGradient:
    def test_bandit_analytic(self):
        policy = LinearSoftmaxPolicy(onehot_features(1), 2)
        grad = exact_policy_gradient(one_state_bandit(), np.zeros(2), 1.0, policy)
        np.testing.assert_allclose(grad, [0.25, -0.25], atol=1e-14)

    def test_uniform_rewards_zero_gradient(self, tab_policy, rng):
        mdp = TabularMDP(
            transition=random_tensor(rng),
            rewards=np.full((2, 2), 7.0),
            initial=np.array([0.3, 0.7]),
            horizon=3,
        )
        theta = 0.4 * rng.standard_normal(4)
        grad = exact_policy_gradient(mdp, theta, 1.0, tab_policy)
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_matches_finite_differences(self, toy_mdp, tab_policy, rng):
        theta = 0.4 * rng.standard_normal(4)
        grad = exact_policy_gradient(toy_mdp, theta, 0.9, tab_policy)
        h = 1e-6
        fd = np.zeros_like(grad)
        for j in range(grad.size):
            e = np.zeros_like(grad)
            e[j] = h
            fd[j] = (
                exact_expected_return(toy_mdp, theta + e, 0.9, tab_policy)
                - exact_expected_return(toy_mdp, theta - e, 0.9, tab_policy)
            ) / (2 * h)
        assert np.max(np.abs(grad - fd)) <= 1e-7 * max(1.0, np.max(np.abs(fd)))

    def test_score_zero_mean_over_trajectories(self, toy_mdp, tab_policy, rng):
        theta = 0.4 * rng.standard_normal(4)
        total = np.zeros(4)
        for traj, prob in enumerate_trajectories(toy_mdp, theta, tab_policy):
            scores = tab_policy.grad_log_prob_batch(theta, traj.states[:-1], traj.actions)
            total += prob * scores.sum(axis=0)
        np.testing.assert_allclose(total, 0.0, atol=1e-10)


class TestEstimatorExpectations:
    def components(self, rng, k=3, dim=4):
        return [(0.4 * rng.standard_normal(dim), random_tensor(rng)) for _ in range(k)]

    def test_ilr_mlr_pg_unbiased(self, toy_mdp, tab_policy, rng):
        components = self.components(rng)
        theta_k, omega_k = components[-1]
        target = TabularMDP(omega_k, toy_mdp.rewards, toy_mdp.initial, toy_mdp.horizon)
        exact = exact_policy_gradient(target, theta_k, 0.9, tab_policy)
        for kind in ("pg", "ilr", "mlr"):
            est = estimator_exact_expectation(kind, toy_mdp, components, 0.9, tab_policy)
            np.testing.assert_allclose(est, exact, atol=1e-10)

    def test_mlr_windowed_unbiased(self, toy_mdp, tab_policy, rng):
        components = self.components(rng, k=4)
        theta_k, omega_k = components[-1]
        target = TabularMDP(omega_k, toy_mdp.rewards, toy_mdp.initial, toy_mdp.horizon)
        exact = exact_policy_gradient(target, theta_k, 0.9, tab_policy)
        est = estimator_exact_expectation(
            "mlr", toy_mdp, components, 0.9, tab_policy, rolling_window=2
        )
        np.testing.assert_allclose(est, exact, atol=1e-10)

    def test_tlr_unbiased_under_shared_model(self, toy_mdp, tab_policy, rng):
        shared = random_tensor(rng)
        components = [(0.4 * rng.standard_normal(4), shared) for _ in range(3)]
        target = TabularMDP(shared, toy_mdp.rewards, toy_mdp.initial, toy_mdp.horizon)
        exact = exact_policy_gradient(target, components[-1][0], 0.9, tab_policy)
        est = estimator_exact_expectation("tlr", toy_mdp, components, 0.9, tab_policy)
        np.testing.assert_allclose(est, exact, atol=1e-10)

    def test_ilr_mean_unbiased(self, toy_mdp, tab_policy, rng):
        components = self.components(rng)
        theta_k, omega_k = components[-1]
        target = TabularMDP(omega_k, toy_mdp.rewards, toy_mdp.initial, toy_mdp.horizon)
        exact = exact_expected_return(target, theta_k, 0.9, tab_policy)
        est = estimator_exact_expectation("ilr_mean", toy_mdp, components, 0.9, tab_policy)
        assert est == pytest.approx(exact, abs=1e-12)

    def test_full_return_weighting_same_expectation(self, toy_mdp, tab_policy, rng):
        # replacing reward-to-go by the full return leaves the exact
        # expectation unchanged (score terms of the past are mean zero)
        components = self.components(rng)
        theta_k, omega_k = components[-1]
        gamma = 0.9
        env = TabularEnv(toy_mdp)
        from greensim_rl.core import reward_to_go
        from greensim_rl.estimators import traj_rel_logdensity

        expect_rtg = np.zeros(4)
        expect_full = np.zeros(4)
        k = len(components)
        for theta_i, omega_i in components:
            for traj, prob in enumerate_trajectories(toy_mdp, theta_i, tab_policy, omega=omega_i):
                ratio = np.exp(
                    traj_rel_logdensity(traj, theta_k, omega_k, env, tab_policy)
                    - traj_rel_logdensity(traj, theta_i, omega_i, env, tab_policy)
                )
                scores = tab_policy.grad_log_prob_batch(theta_k, traj.states[:-1], traj.actions)
                rtg = reward_to_go(traj.rewards, gamma)
                full = rtg[0]
                expect_rtg += (prob / k) * ratio * (scores.T @ rtg)
                expect_full += (prob / k) * ratio * scores.sum(axis=0) * full
        np.testing.assert_allclose(expect_rtg, expect_full, atol=1e-10)


class TestEvaluatePolicyOnToy:
    def test_converges_to_exact_return(self, toy_mdp, tab_policy, rng):
        theta = 0.4 * rng.standard_normal(4)
        exact = exact_expected_return(toy_mdp, theta, 1.0, tab_policy)
        env = TabularEnv(toy_mdp)
        trajs = rollout_batch(env, tab_policy, theta, toy_mdp.transition, 100_000, stream(41))
        returns = np.array([trajectory_return(t, 1.0) for t in trajs])
        value = evaluate_policy(theta, env, toy_mdp.transition, tab_policy, 100_000, stream(41))
        se = returns.std() / np.sqrt(returns.size)
        assert abs(value - exact) < 4 * se


class TestOracleChecks:
    def test_all_pass(self):
        results = run_oracle_checks()
        failures = [name for name, ok, _ in results if not ok]
        assert failures == []


class TestValidation:
    def test_row_sum_validation(self):
        bad = np.full((2, 2, 2), 0.5)
        bad[0, 0, 0] = 0.6
        with pytest.raises(ValueError):
            TabularMDP(bad, np.zeros((2, 2)), np.array([1.0, 0.0]), 2)

    def test_size_caps(self, rng):
        with pytest.raises(ValueError):
            TabularMDP(
                random_tensor(rng, 6, 2), np.zeros((6, 2)), np.full(6, 1 / 6), 2
            )
        with pytest.raises(ValueError):
            TabularMDP(random_tensor(rng), np.zeros((2, 2)), np.array([1.0, 0.0]), 5)
