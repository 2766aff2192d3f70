"""Finite-horizon decision process primitives.

Shared language for the whole package: trajectories, discounted returns,
the environment and policy contracts, rollouts, and hierarchical RNG
streams.  States are dense float vectors (environments document the
meaning of each coordinate, including the step index stored as a float);
actions are integers in ``[0, action_count)``.

All randomness flows through explicitly passed ``numpy.random.Generator``
instances.  Nothing in this package touches global RNG state, so common
random numbers across compared configurations reduce to reusing the same
stream path (see :func:`substream`).
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "Environment",
    "Policy",
    "RolloutError",
    "Step",
    "Trajectory",
    "rollout",
    "rollout_batch",
    "substream",
    "trajectory_return",
    "read_trajectories_jsonl",
    "write_trajectories_jsonl",
]


class RolloutError(RuntimeError):
    """Environment sampling produced an unusable state during a rollout."""


def substream(root_seed: int, *path: int) -> np.random.Generator:
    """Independent PCG64 generator for a hierarchical stream path.

    Streams are counter-based: the generator for ``(root_seed, *path)`` is
    a pure function of its arguments, never of how many draws any other
    stream consumed.  This is what makes common random numbers hold
    exactly across configurations that consume different amounts of
    randomness.
    """
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(root_seed, spawn_key=tuple(path)))
    )


@dataclass(frozen=True)
class Step:
    """One transition: ``(state, action, reward, next_state)``."""

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """A state-action-reward path plus the iteration index that generated it.

    ``states`` has shape ``(H, state_dim)`` and chains with the per-step
    arrays: step ``t`` (0-based here) is ``(states[t], actions[t],
    rewards[t], states[t+1])``.  Arrays are frozen after construction;
    trajectories are safe to share across threads.

    ``provenance`` is the replay-buffer iteration index of the
    (policy, transition-model) pair that produced the trajectory, or -1
    for trajectories generated outside a training loop.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    provenance: int = -1

    def __post_init__(self) -> None:
        states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        if states.shape[0] != actions.shape[0] + 1:
            raise ValueError(
                f"need one more state than action, got {states.shape[0]} states "
                f"and {actions.shape[0]} actions"
            )
        if rewards.shape[0] != actions.shape[0]:
            raise ValueError("one reward per action required")
        for arr in (states, actions, rewards):
            arr.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        """Number of visited states (one more than the number of steps)."""
        return self.states.shape[0]

    @property
    def steps(self) -> list[Step]:
        return [
            Step(self.states[t], int(self.actions[t]), float(self.rewards[t]), self.states[t + 1])
            for t in range(self.n_steps)
        ]


def trajectory_return(traj: Trajectory, gamma: float) -> float:
    """Discounted return ``sum_t gamma^(t-1) * r_t`` (t is 1-based).

    An empty trajectory returns 0.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    n = traj.n_steps
    if n == 0:
        return 0.0
    if gamma == 1.0:
        return float(np.sum(traj.rewards))
    return float(np.dot(gamma ** np.arange(n), traj.rewards))


def reward_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Per-step tail sums ``rtg_t = sum_{t' >= t} gamma^(t'-1) * r_t'``.

    The discount exponent is anchored at the trajectory start (t' is the
    1-based step index), so this is the causal weight carried by the score
    term of step t in every gradient estimator.
    """
    n = rewards.shape[0]
    if n == 0:
        return np.zeros(0)
    discounted = (gamma ** np.arange(n)) * rewards
    return np.cumsum(discounted[::-1])[::-1].copy()


class Environment(abc.ABC):
    """Contract every environment implements.

    ``transition_logpdf`` must be the log-density of the same measure
    ``sample_transition`` draws from, up to an additive term that is
    constant in the transition-model parameters ``omega`` for any fixed
    transition.  Such terms cancel in every likelihood ratio the
    estimators form, so environments may (and do) omit them.
    """

    @abc.abstractmethod
    def horizon(self) -> int:
        """Number of visited states H; rollouts take H - 1 steps."""

    @abc.abstractmethod
    def action_count(self) -> int:
        ...

    @abc.abstractmethod
    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        ...

    @abc.abstractmethod
    def sample_transition(self, state, action: int, omega, rng: np.random.Generator) -> np.ndarray:
        ...

    @abc.abstractmethod
    def transition_logpdf(self, state, action: int, next_state, omega) -> float:
        ...

    @abc.abstractmethod
    def reward(self, state, action: int, step_index: int) -> float:
        """Reward for taking ``action`` in ``state`` at 1-based step ``step_index``."""

    def terminal_reward(self, state) -> float:
        """Payout on reaching the final state; credited to the last step."""
        return 0.0

    # Vectorized hooks used by the hot paths.  The loop fallbacks keep
    # custom environments easy to write; built-in environments override.

    def sample_initial_batch(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.sample_initial(rng) for _ in range(n)])

    def sample_transition_batch(self, states, actions, omega, rng) -> np.ndarray:
        return np.stack(
            [
                self.sample_transition(states[i], int(actions[i]), omega, rng)
                for i in range(states.shape[0])
            ]
        )

    def transition_logpdf_batch(self, states, actions, next_states, omega) -> np.ndarray:
        return np.array(
            [
                self.transition_logpdf(states[i], int(actions[i]), next_states[i], omega)
                for i in range(states.shape[0])
            ]
        )

    def reward_batch(self, states, actions, step_index: int) -> np.ndarray:
        return np.array(
            [self.reward(states[i], int(actions[i]), step_index) for i in range(states.shape[0])]
        )

    def terminal_reward_batch(self, states) -> np.ndarray:
        return np.array([self.terminal_reward(states[i]) for i in range(states.shape[0])])


class Policy(abc.ABC):
    """Differentiable stochastic policy over discrete actions.

    Parameters travel as a flat float vector ``theta`` of length
    ``param_dim``; the policy object owns the architecture (feature map
    and layer shapes) needed to interpret it.
    """

    @property
    @abc.abstractmethod
    def param_dim(self) -> int:
        ...

    @property
    @abc.abstractmethod
    def n_actions(self) -> int:
        ...

    @abc.abstractmethod
    def action_probs_batch(self, theta: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Action probabilities, shape ``(n, n_actions)``; rows sum to 1."""

    @abc.abstractmethod
    def log_prob_batch(self, theta, states, actions) -> np.ndarray:
        ...

    @abc.abstractmethod
    def grad_log_prob_batch(self, theta, states, actions) -> np.ndarray:
        """Score vectors d/dtheta log pi(a|s), shape ``(n, param_dim)``."""

    def weighted_score_sum(self, theta, states, actions, weights) -> np.ndarray:
        """``sum_n weights[n] * grad_log_prob(theta, states[n], actions[n])``.

        Concrete policies override this with a matrix-product form that
        skips materializing the per-row score vectors.
        """
        return self.grad_log_prob_batch(theta, states, actions).T @ np.asarray(weights)

    def action_probs(self, theta, state) -> np.ndarray:
        return self.action_probs_batch(theta, np.asarray(state, dtype=np.float64)[None, :])[0]

    def log_prob(self, theta, state, action: int) -> float:
        return float(
            self.log_prob_batch(
                theta, np.asarray(state, dtype=np.float64)[None, :], np.array([action])
            )[0]
        )

    def grad_log_prob(self, theta, state, action: int) -> np.ndarray:
        return self.grad_log_prob_batch(
            theta, np.asarray(state, dtype=np.float64)[None, :], np.array([action])
        )[0]

    def sample_action(self, theta, state, rng: np.random.Generator) -> int:
        return int(self.sample_actions_batch(theta, np.asarray(state)[None, :], rng)[0])

    def sample_actions_batch(self, theta, states, rng: np.random.Generator) -> np.ndarray:
        """Inverse-CDF sampling; one uniform draw per row."""
        probs = self.action_probs_batch(theta, states)
        u = rng.random(states.shape[0])
        cum = np.cumsum(probs, axis=1)
        cum[:, -1] = 1.0  # guard against cumulative rounding shortfall
        return np.argmax(cum >= u[:, None], axis=1).astype(np.int64)

    def init_params(self, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
        return scale * rng.standard_normal(self.param_dim)


def rollout(
    env: Environment,
    policy: Policy,
    theta: np.ndarray,
    omega,
    rng: np.random.Generator,
    provenance: int = -1,
) -> Trajectory:
    """Generate one episode under ``(policy(theta), omega)``.

    Per step: sample the action, record the step reward, sample the next
    state.  The terminal payout (if the environment defines one) is added
    to the final step's reward.  Deterministic given the rng state.
    """
    horizon = env.horizon()
    state = np.asarray(env.sample_initial(rng), dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise RolloutError(f"non-finite initial state {state}")
    states = [state]
    actions: list[int] = []
    rewards: list[float] = []
    for t in range(1, horizon):
        action = policy.sample_action(theta, state, rng)
        r = env.reward(state, action, t)
        state = np.asarray(env.sample_transition(state, action, omega, rng), dtype=np.float64)
        if not np.all(np.isfinite(state)):
            raise RolloutError(f"non-finite state at step {t}: {state}")
        if t == horizon - 1:
            r += env.terminal_reward(state)
        states.append(state)
        actions.append(action)
        rewards.append(r)
    return Trajectory(np.stack(states), np.array(actions), np.array(rewards), provenance)


def rollout_batch(
    env: Environment,
    policy: Policy,
    theta: np.ndarray,
    omega,
    n: int,
    rng: np.random.Generator,
    provenance: int = -1,
) -> list[Trajectory]:
    """Generate ``n`` episodes with vectorized per-step sampling.

    All episodes advance in lockstep (valid for fixed-horizon
    environments, which is all of the built-in ones).  The draw order
    differs from n sequential :func:`rollout` calls, but the batch itself
    is deterministic given the rng state.
    """
    horizon = env.horizon()
    states = np.asarray(env.sample_initial_batch(n, rng), dtype=np.float64)
    if not np.all(np.isfinite(states)):
        raise RolloutError("non-finite initial state in batch")
    all_states = [states]
    all_actions = []
    all_rewards = []
    for t in range(1, horizon):
        actions = policy.sample_actions_batch(theta, states, rng)
        rewards = env.reward_batch(states, actions, t)
        states = np.asarray(env.sample_transition_batch(states, actions, omega, rng), dtype=np.float64)
        if not np.all(np.isfinite(states)):
            raise RolloutError(f"non-finite state in batch at step {t}")
        if t == horizon - 1:
            rewards = rewards + env.terminal_reward_batch(states)
        all_states.append(states)
        all_actions.append(actions)
        all_rewards.append(rewards)
    state_cube = np.stack(all_states, axis=1)  # (n, H, dim)
    action_mat = np.stack(all_actions, axis=1) if all_actions else np.zeros((n, 0), dtype=np.int64)
    reward_mat = np.stack(all_rewards, axis=1) if all_rewards else np.zeros((n, 0))
    return [
        Trajectory(state_cube[i], action_mat[i], reward_mat[i], provenance) for i in range(n)
    ]


# --- serialization ---------------------------------------------------------
#
# One JSON object per trajectory, newline-delimited.  Each step is a flat
# array of numbers: state, action, reward, next_state.

def trajectory_to_jsonable(traj: Trajectory) -> dict:
    steps = []
    for t in range(traj.n_steps):
        steps.append(
            [float(x) for x in traj.states[t]]
            + [float(traj.actions[t]), float(traj.rewards[t])]
            + [float(x) for x in traj.states[t + 1]]
        )
    return {"provenance": int(traj.provenance), "steps": steps}


def trajectory_from_jsonable(obj: dict, state_dim: int) -> Trajectory:
    raw_steps = obj["steps"]
    if not raw_steps:
        raise ValueError("cannot reconstruct a trajectory with no steps from JSON")
    states = [np.array(raw_steps[0][:state_dim])]
    actions = []
    rewards = []
    for row in raw_steps:
        if len(row) != 2 * state_dim + 2:
            raise ValueError(f"step row of length {len(row)} does not match state_dim={state_dim}")
        actions.append(int(row[state_dim]))
        rewards.append(float(row[state_dim + 1]))
        states.append(np.array(row[state_dim + 2 :]))
    return Trajectory(np.stack(states), np.array(actions), np.array(rewards), int(obj["provenance"]))


def write_trajectories_jsonl(trajectories: Iterable[Trajectory], fh: IO[str]) -> None:
    for traj in trajectories:
        fh.write(json.dumps(trajectory_to_jsonable(traj)) + "\n")


def read_trajectories_jsonl(fh: IO[str], state_dim: int) -> list[Trajectory]:
    out = []
    for line in fh:
        line = line.strip()
        if line:
            out.append(trajectory_from_jsonable(json.loads(line), state_dim))
    return out
