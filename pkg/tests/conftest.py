import numpy as np
import pytest

from a2po_lab.decmdp import DecMdp, JointPolicy
from a2po_lab.environments import random_decmdp


def random_instance(seed, n_states=3, counts=(2, 2), gamma=0.9, scale=1.0):
    rng = np.random.default_rng(seed)
    mdp = random_decmdp(n_states, len(counts), counts, seed=rng.integers(2**32), gamma=gamma)
    base = JointPolicy.random(n_states, counts, rng, scale)
    target = JointPolicy.random(n_states, counts, rng, scale)
    return mdp, base, target, rng


def chain_mdp(rewards=(0.0, 1.0), gamma=0.9):
    """Two-state symmetric chain: every joint action moves to either state with prob 1/2."""
    n = len(rewards)
    transition = np.full((n, 2, n), 1.0 / n)
    reward = np.repeat(np.asarray(rewards, float)[:, None], 2, axis=1)
    return DecMdp(transition, reward, gamma, np.full(n, 1.0 / n), (2,))


@pytest.fixture
def small():
    return random_instance(0)
