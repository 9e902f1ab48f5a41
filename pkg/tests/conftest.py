import numpy as np
import pytest

from knnr.core import Dataset, PolicySpec
from knnr.envs import make_env
from knnr.envs.lqr import LqrEnv, LqrParams


def dataset_from_lists(states, actions, rewards, effective_len=None, terminal=None):
    """Small hand-built dataset; ``states`` is (n, T+1, d1)."""
    return Dataset(np.asarray(states, float), np.asarray(actions, float), np.asarray(rewards, float), effective_len, terminal)


def scalar_policy(fn, name="scalar"):
    """Policy acting on 1-dim states: ``u = fn(t, x)``."""
    return PolicySpec(lambda t, X: np.asarray(fn(t, X[:, 0]), float).reshape(-1, 1), name=name)


@pytest.fixture
def lqr_env():
    return make_env("lqr")


@pytest.fixture
def lqr_quiet():
    return LqrEnv(LqrParams().with_overrides(noise_cov=((0.0, 0.0), (0.0, 0.0))))


@pytest.fixture
def lob_env():
    return make_env("lob")


@pytest.fixture
def bp_env():
    return make_env("bp")
