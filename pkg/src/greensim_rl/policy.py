"""Differentiable stochastic policies.

Two softmax policies over discrete actions:

* :class:`LinearSoftmaxPolicy` -- logits are linear in state features with
  an action-block one-hot layout, so the score has the closed form
  ``phi(s,a) - sum_a' phi(s,a') pi(a'|s)``.  Mainly used as an analytic
  reference in tests.
* :class:`MlpSoftmaxPolicy` -- one sigmoid hidden layer feeding a softmax
  output layer, with exact reverse-mode score gradients.  This is the
  policy the training loop uses.

Both expose batched forward/score passes; the scalar contract methods
delegate to them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .core import Policy

__all__ = [
    "FeatureMap",
    "LinearSoftmaxPolicy",
    "MlpSoftmaxPolicy",
    "identity_features",
    "load_params",
    "make_policy",
    "onehot_features",
    "purification_features",
    "save_params",
    "softmax_probs",
]


def softmax_probs(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; output sums to 1 along ``axis``."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


@dataclass(frozen=True)
class FeatureMap:
    """Batched state featurizer: ``(n, state_dim) -> (n, dim)``."""

    dim: int
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return self.fn(np.atleast_2d(np.asarray(states, dtype=np.float64)))


def identity_features(state_dim: int) -> FeatureMap:
    return FeatureMap(state_dim, lambda s: s)


def purification_features(p_bar: float, i_bar: float, horizon: int) -> FeatureMap:
    """Normalized (protein mass, impurity mass, step index) features."""
    scale = np.array([1.0 / p_bar, 1.0 / i_bar, 1.0 / horizon])
    return FeatureMap(3, lambda s: s * scale)


def onehot_features(n_states: int) -> FeatureMap:
    """One-hot encoding of an integer state index stored as ``state[0]``."""

    def fn(states: np.ndarray) -> np.ndarray:
        idx = states[:, 0].astype(np.int64)
        out = np.zeros((states.shape[0], n_states))
        out[np.arange(states.shape[0]), idx] = 1.0
        return out

    return FeatureMap(n_states, fn)


class LinearSoftmaxPolicy(Policy):
    """Softmax over per-action linear scores of the state features.

    ``theta`` has length ``n_actions * features.dim``, laid out as one
    feature block per action; the implied state-action feature vector
    ``phi(s, a)`` is ``phi(s)`` placed in block ``a`` with zeros elsewhere.
    """

    def __init__(self, features: FeatureMap, n_actions: int):
        self.features = features
        self._n_actions = n_actions

    @property
    def param_dim(self) -> int:
        return self._n_actions * self.features.dim

    @property
    def n_actions(self) -> int:
        return self._n_actions

    def _logits(self, theta: np.ndarray, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        phi = self.features(states)
        weights = np.asarray(theta, dtype=np.float64).reshape(self._n_actions, self.features.dim)
        return phi, phi @ weights.T

    def action_probs_batch(self, theta, states) -> np.ndarray:
        _, logits = self._logits(theta, states)
        return softmax_probs(logits)

    def log_prob_batch(self, theta, states, actions) -> np.ndarray:
        _, logits = self._logits(theta, states)
        logp = log_softmax(logits)
        return logp[np.arange(logp.shape[0]), np.asarray(actions, dtype=np.int64)]

    def grad_log_prob_batch(self, theta, states, actions) -> np.ndarray:
        phi, logits = self._logits(theta, states)
        probs = softmax_probs(logits)
        n = phi.shape[0]
        residual = -probs
        residual[np.arange(n), np.asarray(actions, dtype=np.int64)] += 1.0
        # phi(s,a) - sum_a' phi(s,a') pi(a'|s): block a' carries phi(s) * (1{a'=a} - pi(a'|s))
        grad = residual[:, :, None] * phi[:, None, :]
        return grad.reshape(n, self.param_dim)

    def weighted_score_sum(self, theta, states, actions, weights) -> np.ndarray:
        phi, logits = self._logits(theta, states)
        probs = softmax_probs(logits)
        n = phi.shape[0]
        residual = -probs
        residual[np.arange(n), np.asarray(actions, dtype=np.int64)] += 1.0
        return ((residual * weights[:, None]).T @ phi).reshape(self.param_dim)


class MlpSoftmaxPolicy(Policy):
    """Two-layer perceptron policy: sigmoid hidden layer, softmax output.

    Hidden unit d computes ``z_d = sigmoid(w_d0 + w_d . phi(s))`` and
    output unit a computes the logit ``T_a = b_a0 + b_a . z``; action
    probabilities are ``softmax(T)``.  ``theta`` packs the hidden weight
    matrix (with bias column) followed by the output weight matrix (with
    bias column).
    """

    def __init__(self, features: FeatureMap, n_actions: int, hidden_dim: int = 16):
        self.features = features
        self._n_actions = n_actions
        self.hidden_dim = hidden_dim

    @property
    def param_dim(self) -> int:
        return self.hidden_dim * (self.features.dim + 1) + self._n_actions * (self.hidden_dim + 1)

    @property
    def n_actions(self) -> int:
        return self._n_actions

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_dim,):
            raise ValueError(f"theta must have shape ({self.param_dim},), got {theta.shape}")
        cut = self.hidden_dim * (self.features.dim + 1)
        w = theta[:cut].reshape(self.hidden_dim, self.features.dim + 1)
        b = theta[cut:].reshape(self._n_actions, self.hidden_dim + 1)
        return w, b

    def _forward(self, theta, states) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w, b = self.unpack(theta)
        phi = self.features(states)
        hidden = expit(w[:, 0] + phi @ w[:, 1:].T)
        logits = b[:, 0] + hidden @ b[:, 1:].T
        return phi, hidden, logits

    def action_probs_batch(self, theta, states) -> np.ndarray:
        return softmax_probs(self._forward(theta, states)[2])

    def log_prob_batch(self, theta, states, actions) -> np.ndarray:
        logp = log_softmax(self._forward(theta, states)[2])
        return logp[np.arange(logp.shape[0]), np.asarray(actions, dtype=np.int64)]

    def _backward_pieces(self, theta, states, actions):
        _, b = self.unpack(theta)
        phi, hidden, logits = self._forward(theta, states)
        probs = softmax_probs(logits)
        n = phi.shape[0]
        dlogits = -probs
        dlogits[np.arange(n), np.asarray(actions, dtype=np.int64)] += 1.0
        hidden_ext = np.concatenate([np.ones((n, 1)), hidden], axis=1)
        dhidden = (dlogits @ b[:, 1:]) * hidden * (1.0 - hidden)
        phi_ext = np.concatenate([np.ones((n, 1)), phi], axis=1)
        return dlogits, hidden_ext, dhidden, phi_ext

    def grad_log_prob_batch(self, theta, states, actions) -> np.ndarray:
        dlogits, hidden_ext, dhidden, phi_ext = self._backward_pieces(theta, states, actions)
        n = dlogits.shape[0]
        grad_b = dlogits[:, :, None] * hidden_ext[:, None, :]
        grad_w = dhidden[:, :, None] * phi_ext[:, None, :]
        return np.concatenate([grad_w.reshape(n, -1), grad_b.reshape(n, -1)], axis=1)

    def weighted_score_sum(self, theta, states, actions, weights) -> np.ndarray:
        # sum_n w_n * dlog pi(a_n|s_n)/dtheta without materializing per-row
        # gradients: both layer sums collapse into matrix products.
        dlogits, hidden_ext, dhidden, phi_ext = self._backward_pieces(theta, states, actions)
        grad_b = (dlogits * weights[:, None]).T @ hidden_ext
        grad_w = (dhidden * weights[:, None]).T @ phi_ext
        return np.concatenate([grad_w.reshape(-1), grad_b.reshape(-1)])


def make_policy(kind: str, features: FeatureMap, n_actions: int, hidden_dim: int = 16) -> Policy:
    if kind == "linear":
        return LinearSoftmaxPolicy(features, n_actions)
    if kind == "mlp":
        return MlpSoftmaxPolicy(features, n_actions, hidden_dim)
    raise ValueError(f"unknown policy kind {kind!r} (expected 'linear' or 'mlp')")


# --- checkpoints ------------------------------------------------------------
#
# JSON with a shape header plus the flat parameter vector.  Python's float
# repr is the shortest round-tripping decimal, so load(save(theta)) is
# bit-exact for finite values.

def save_params(path, theta: np.ndarray, kind: str, meta: dict | None = None) -> None:
    payload = {
        "kind": kind,
        "length": int(np.asarray(theta).shape[0]),
        "values": [float(x) for x in np.asarray(theta, dtype=np.float64)],
    }
    if meta:
        payload["meta"] = meta
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_params(path) -> tuple[np.ndarray, str]:
    with open(path) as fh:
        payload = json.load(fh)
    values = np.array(payload["values"], dtype=np.float64)
    if values.shape[0] != payload["length"]:
        raise ValueError(
            f"checkpoint header says {payload['length']} values, file has {values.shape[0]}"
        )
    return values, payload["kind"]
