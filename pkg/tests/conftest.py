import numpy as np
import pytest

from greensim_rl import bioenv
from greensim_rl.core import substream
from greensim_rl.oracle import TabularMDP
from greensim_rl.policy import (
    LinearSoftmaxPolicy,
    MlpSoftmaxPolicy,
    onehot_features,
    purification_features,
)


@pytest.fixture(scope="session")
def scn():
    return bioenv.default_scenario()


@pytest.fixture(scope="session")
def env(scn):
    return bioenv.ChromatographyEnv(scn)


@pytest.fixture(scope="session")
def mlp_policy(scn):
    return MlpSoftmaxPolicy(purification_features(scn.p_bar, scn.i_bar, 3), 10, hidden_dim=16)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture(scope="session")
def toy_mdp():
    return TabularMDP(
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


@pytest.fixture(scope="session")
def tab_policy():
    return LinearSoftmaxPolicy(onehot_features(2), 2)


def random_tensor(rng, n_states=2, n_actions=2):
    raw = rng.uniform(0.1, 1.0, size=(n_states, n_actions, n_states))
    return raw / raw.sum(axis=2, keepdims=True)


def stream(*path):
    return substream(987654321, *path)
