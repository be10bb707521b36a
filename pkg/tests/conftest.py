import os

# small-matrix workloads: BLAS threading only adds contention, and the
# acceptance suite runs seeds in parallel worker processes anyway
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from spu.tabular import FiniteMdp, TabularPolicy


@pytest.fixture
def chain_mdp():
    """Two-state chain with asymmetric rewards and mixing transitions."""
    transition = np.array([
        [[0.9, 0.1], [0.2, 0.8]],
        [[0.7, 0.3], [0.4, 0.6]],
    ])
    reward = np.array([[0.1, -0.2], [1.0, 0.5]])
    return FiniteMdp(transition=transition, reward=reward, discount=0.9,
                     initial_dist=np.array([0.6, 0.4]))


@pytest.fixture
def chain_policy():
    return TabularPolicy(probs=np.array([[0.7, 0.3], [0.4, 0.6]]))


@pytest.fixture
def line_world():
    """Five cells in a line, move left/right with a 10% slip, bonus on entering
    the right end. Plays the role of a small gridworld with exact tensors."""
    n = 5
    transition = np.zeros((n, 2, n))
    reward = np.zeros((n, 2))
    for s in range(n):
        for a, move in enumerate((-1, 1)):
            intended = min(max(s + move, 0), n - 1)
            slipped = min(max(s - move, 0), n - 1)
            transition[s, a, intended] += 0.9
            transition[s, a, slipped] += 0.1
            reward[s, a] = 0.9 * (intended == n - 1) + 0.1 * (slipped == n - 1) - 0.02
    return FiniteMdp(transition=transition, reward=reward, discount=0.9,
                     initial_dist=np.full(n, 1.0 / n))
