"""Exact ground truth on tiny tabular MDPs.

Full trajectory enumeration gives exact expected returns and exact policy
gradients on problems small enough to enumerate, which is what the
likelihood-ratio estimators are verified against: every estimator's exact
expectation (computed by replacing each buffer record's sampled
trajectories with the full enumeration, weighted by generating
probabilities) must reproduce the exact gradient.

States are single-coordinate vectors holding the state index as a float;
policies featurize them however they like (one-hot works well).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Environment, Policy, Trajectory, reward_to_go, trajectory_return
from .estimators import (
    BufferRecord,
    ReplayBuffer,
    ilr_gradient,
    ilr_mean_estimate,
    mlr_gradient,
    pg_gradient,
    tlr_gradient,
)

__all__ = [
    "EnumerationSizeError",
    "TabularEnv",
    "TabularMDP",
    "enumerate_trajectories",
    "estimator_exact_expectation",
    "exact_expected_return",
    "exact_policy_gradient",
    "run_oracle_checks",
]

MAX_PATHS = 1_000_000


class EnumerationSizeError(ValueError):
    """The trajectory space is too large to enumerate."""


@dataclass(frozen=True)
class TabularMDP:
    """A small finite MDP: transition tensor, reward table, initial law.

    ``transition[s, a, s']`` rows must be probability vectors;
    ``rewards[s, a]`` is the step reward; ``initial`` the distribution of
    the first state.  Sizes are capped (at most 5 states and actions,
    horizon at most 4) because everything downstream enumerates.
    """

    transition: np.ndarray
    rewards: np.ndarray
    initial: np.ndarray
    horizon: int

    def __post_init__(self):
        transition = np.asarray(self.transition, dtype=np.float64)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        initial = np.asarray(self.initial, dtype=np.float64)
        s, a, s2 = transition.shape
        if s != s2 or rewards.shape != (s, a) or initial.shape != (s,):
            raise ValueError("inconsistent table shapes")
        if s > 5 or a > 5:
            raise ValueError("at most 5 states and 5 actions")
        if not 1 <= self.horizon <= 4:
            raise ValueError("horizon must be in 1..4")
        if not np.all(np.isfinite(transition)) or not np.all(np.isfinite(rewards)):
            raise ValueError("tables must be finite")
        if np.any(transition < 0) or np.any(initial < 0):
            raise ValueError("probabilities must be nonnegative")
        if np.max(np.abs(transition.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if abs(float(initial.sum()) - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")
        for arr in (transition, rewards, initial):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "initial", initial)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


class TabularEnv(Environment):
    """Environment adapter; ``omega`` is a transition tensor.

    The tensor passed at sampling/density time replaces the MDP's own, so
    one environment serves a whole family of transition models over the
    same state/action space (exactly what the ratio estimators need).
    """

    def __init__(self, mdp: TabularMDP):
        self.mdp = mdp

    def horizon(self) -> int:
        return self.mdp.horizon

    def action_count(self) -> int:
        return self.mdp.n_actions

    @property
    def state_dim(self) -> int:
        return 1

    def sample_initial(self, rng) -> np.ndarray:
        return np.array([float(rng.choice(self.mdp.n_states, p=self.mdp.initial))])

    def sample_initial_batch(self, n, rng) -> np.ndarray:
        return rng.choice(self.mdp.n_states, size=n, p=self.mdp.initial).astype(np.float64)[:, None]

    def sample_transition(self, state, action, omega, rng) -> np.ndarray:
        probs = np.asarray(omega)[int(state[0]), action]
        return np.array([float(rng.choice(self.mdp.n_states, p=probs))])

    def sample_transition_batch(self, states, actions, omega, rng) -> np.ndarray:
        omega = np.asarray(omega)
        u = rng.random(states.shape[0])
        rows = omega[states[:, 0].astype(np.int64), np.asarray(actions, dtype=np.int64)]
        cum = np.cumsum(rows, axis=1)
        cum[:, -1] = 1.0
        return np.argmax(cum >= u[:, None], axis=1).astype(np.float64)[:, None]

    def transition_logpdf(self, state, action, next_state, omega) -> float:
        p = float(np.asarray(omega)[int(state[0]), action, int(next_state[0])])
        return float(np.log(p)) if p > 0.0 else -np.inf

    def transition_logpdf_batch(self, states, actions, next_states, omega) -> np.ndarray:
        omega = np.asarray(omega)
        p = omega[
            states[:, 0].astype(np.int64),
            np.asarray(actions, dtype=np.int64),
            next_states[:, 0].astype(np.int64),
        ]
        with np.errstate(divide="ignore"):
            return np.where(p > 0.0, np.log(np.maximum(p, 1e-300)), -np.inf)

    def reward(self, state, action, step_index) -> float:
        return float(self.mdp.rewards[int(state[0]), action])

    def reward_batch(self, states, actions, step_index) -> np.ndarray:
        return self.mdp.rewards[states[:, 0].astype(np.int64), np.asarray(actions, dtype=np.int64)]


def enumerate_trajectories(
    mdp: TabularMDP, theta, policy: Policy, omega: np.ndarray | None = None
) -> list[tuple[Trajectory, float]]:
    """Every support trajectory with its exact probability.

    Only branches of positive probability appear; the returned
    probabilities sum to 1.  ``omega`` overrides the MDP's transition
    tensor (defaults to it).
    """
    transition = mdp.transition if omega is None else np.asarray(omega, dtype=np.float64)
    n_paths_bound = mdp.n_states * (mdp.n_states * mdp.n_actions) ** max(mdp.horizon - 1, 0)
    if n_paths_bound > MAX_PATHS:
        raise EnumerationSizeError(f"up to {n_paths_bound} paths exceeds the {MAX_PATHS} cap")
    state_vecs = [np.array([float(s)]) for s in range(mdp.n_states)]
    action_probs = [policy.action_probs(theta, state_vecs[s]) for s in range(mdp.n_states)]

    out: list[tuple[Trajectory, float]] = []

    def extend(states: list[int], actions: list[int], prob: float):
        t = len(actions)
        if t == mdp.horizon - 1:
            rewards = [mdp.rewards[s, a] for s, a in zip(states, actions)]
            traj = Trajectory(
                np.array([[float(s)] for s in states]), np.array(actions), np.array(rewards)
            )
            out.append((traj, prob))
            return
        s = states[-1]
        for a in range(mdp.n_actions):
            pa = action_probs[s][a]
            if pa <= 0.0:
                continue
            for s2 in range(mdp.n_states):
                ps = transition[s, a, s2]
                if ps <= 0.0:
                    continue
                extend(states + [s2], actions + [a], prob * pa * ps)

    for s1 in range(mdp.n_states):
        if mdp.initial[s1] > 0.0:
            extend([s1], [], float(mdp.initial[s1]))
    return out


def exact_expected_return(mdp: TabularMDP, theta, gamma: float, policy: Policy) -> float:
    """``sum_tau Pr(tau) R(tau)`` by full enumeration."""
    return sum(
        prob * trajectory_return(traj, gamma) for traj, prob in enumerate_trajectories(mdp, theta, policy)
    )


def exact_policy_gradient(mdp: TabularMDP, theta, gamma: float, policy: Policy) -> np.ndarray:
    """Exact gradient of the expected return: score times reward-to-go, averaged."""
    grad = np.zeros(policy.param_dim)
    for traj, prob in enumerate_trajectories(mdp, theta, policy):
        if traj.n_steps == 0:
            continue
        scores = policy.grad_log_prob_batch(theta, traj.states[:-1], traj.actions)
        rtg = reward_to_go(traj.rewards, gamma)
        grad += prob * (scores.T @ rtg)
    return grad


# --- exact estimator expectations --------------------------------------------


def _enumerated_buffer(
    mdp: TabularMDP, components: Sequence[tuple[np.ndarray, np.ndarray]], policy: Policy
) -> tuple[ReplayBuffer, list[np.ndarray]]:
    """Replay buffer whose record i holds the full enumeration under
    component i, plus the matching probability weights."""
    buffer = ReplayBuffer()
    weights = []
    for i, (theta_i, omega_i) in enumerate(components):
        enum = enumerate_trajectories(mdp, theta_i, policy, omega=omega_i)
        buffer.append(BufferRecord(theta_i, omega_i, [t for t, _ in enum], i + 1))
        weights.append(np.array([p for _, p in enum]))
    return buffer, weights


def estimator_exact_expectation(
    kind: str,
    mdp: TabularMDP,
    components: Sequence[tuple[np.ndarray, np.ndarray]],
    gamma: float,
    policy: Policy,
    rolling_window: int | None = None,
):
    """Exact expectation of a gradient estimator over its sampling law.

    Every estimator here is linear in each record's empirical trajectory
    measure, so replacing sampled trajectories with the enumerated support
    weighted by exact generating probabilities yields the estimator's
    expectation exactly.  The target pair is the last component.  ``kind``
    is one of ``pg | ilr | mlr | tlr`` (or ``ilr_mean`` for the
    mean-response estimator).
    """
    env = TabularEnv(mdp)
    buffer, weights = _enumerated_buffer(mdp, components, policy)
    theta_k, omega_k = buffer.records[-1].theta, buffer.records[-1].omega
    window = rolling_window if rolling_window is not None else len(components)
    if kind == "pg":
        return pg_gradient(buffer.records[-1], theta_k, policy, gamma, traj_weights=weights[-1])
    if kind == "ilr":
        return ilr_gradient(buffer, theta_k, omega_k, env, policy, gamma, traj_weights=weights)
    if kind == "ilr_mean":
        return ilr_mean_estimate(buffer, theta_k, omega_k, gamma, env, policy, traj_weights=weights)
    if kind == "mlr":
        return mlr_gradient(
            buffer, theta_k, omega_k, window, env, policy, gamma, traj_weights=weights[-window:]
        )
    if kind == "tlr":
        return tlr_gradient(
            buffer, theta_k, window, policy, gamma, traj_weights=weights[-window:]
        )
    raise ValueError(f"unknown estimator kind {kind!r}")


# --- self-check suite (CLI `oracle-check`) ------------------------------------


def _check_setup():
    from .policy import LinearSoftmaxPolicy, onehot_features

    rng = np.random.default_rng(20240811)
    mdp = TabularMDP(
        transition=np.array(
            [
                [[0.7, 0.3], [0.4, 0.6]],
                [[0.2, 0.8], [0.5, 0.5]],
            ]
        ),
        rewards=np.array([[1.0, -0.5], [0.25, 2.0]]),
        initial=np.array([0.6, 0.4]),
        horizon=3,
    )
    policy = LinearSoftmaxPolicy(onehot_features(2), 2)

    def random_tensor():
        raw = rng.uniform(0.1, 1.0, size=(2, 2, 2))
        return raw / raw.sum(axis=2, keepdims=True)

    components = [
        (0.3 * rng.standard_normal(policy.param_dim), random_tensor()) for _ in range(3)
    ]
    return mdp, policy, components, rng


def run_oracle_checks() -> list[tuple[str, bool, str]]:
    """Run the exactness invariants; returns (name, passed, detail) rows."""
    mdp, policy, components, rng = _check_setup()
    gamma = 0.9
    theta_k, omega_k = components[-1]
    results = []

    enum = enumerate_trajectories(mdp, theta_k, policy, omega=omega_k)
    total = sum(p for _, p in enum)
    results.append(
        ("enumeration probabilities sum to 1", abs(total - 1.0) < 1e-10, f"sum={total!r}")
    )

    target_mdp = TabularMDP(omega_k, mdp.rewards, mdp.initial, mdp.horizon)
    exact = exact_policy_gradient(target_mdp, theta_k, gamma, policy)
    h = 1e-6
    fd = np.zeros_like(exact)
    for j in range(exact.size):
        e = np.zeros_like(exact)
        e[j] = h
        fd[j] = (
            exact_expected_return(target_mdp, theta_k + e, gamma, policy)
            - exact_expected_return(target_mdp, theta_k - e, gamma, policy)
        ) / (2 * h)
    err = float(np.max(np.abs(exact - fd)) / max(1.0, float(np.max(np.abs(fd)))))
    results.append(("exact gradient matches finite differences", err < 1e-7, f"rel err={err:.2e}"))

    score_sum = np.zeros(policy.param_dim)
    for traj, prob in enum:
        score_sum += prob * policy.grad_log_prob_batch(theta_k, traj.states[:-1], traj.actions).sum(
            axis=0
        )
    score_norm = float(np.max(np.abs(score_sum)))
    results.append(("trajectory score has zero mean", score_norm < 1e-10, f"max |.|={score_norm:.2e}"))

    for kind in ("pg", "ilr", "mlr"):
        est = estimator_exact_expectation(kind, mdp, components, gamma, policy)
        err = float(np.max(np.abs(est - exact)))
        results.append((f"{kind} expectation equals exact gradient", err < 1e-10, f"max err={err:.2e}"))

    shared = components[-1][1]
    tlr_components = [(th, shared) for th, _ in components]
    tlr_mdp = TabularMDP(shared, mdp.rewards, mdp.initial, mdp.horizon)
    tlr_exact = exact_policy_gradient(tlr_mdp, theta_k, gamma, policy)
    est = estimator_exact_expectation("tlr", mdp, tlr_components, gamma, policy)
    err = float(np.max(np.abs(est - tlr_exact)))
    results.append(("tlr expectation equals exact gradient", err < 1e-10, f"max err={err:.2e}"))

    mean = estimator_exact_expectation("ilr_mean", mdp, components, gamma, policy)
    exact_mean = exact_expected_return(target_mdp, theta_k, gamma, policy)
    err = abs(mean - exact_mean)
    results.append(("ilr mean estimate equals exact return", err < 1e-12, f"err={err:.2e}"))

    return results
