"""Seed-deterministic toy environments: tabular, continuous-state discrete-action,
and continuous-action, so every policy-head code path has a cheap testbed.
"""

from __future__ import annotations

import math

import numpy as np

from .tabular import FiniteMdp


class _EpisodeGuard:
    """Shared reset/step bookkeeping: stepping a finished episode is an error."""

    def __init__(self):
        self._rng = np.random.default_rng()
        self._done = True

    def _start(self, seed):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._done = False

    def _guard(self):
        if self._done:
            raise RuntimeError("episode finished; call reset() first")


class GridworldEnv(_EpisodeGuard):
    """Grid with four moves, a 5% action slip, and an absorbing goal.

    States are one-hot over cells. The exact transition tensor (slip included)
    is exported as a FiniteMdp so tabular oracles apply to the same dynamics.
    """

    def __init__(self, width: int = 5, height: int = 5, goal: tuple[int, int] | None = None,
                 slip: float = 0.05, step_reward: float = -0.01, goal_reward: float = 1.0,
                 max_steps: int = 100):
        super().__init__()
        self.width, self.height = width, height
        self.goal = goal if goal is not None else (width - 1, height - 1)
        self.slip = slip
        self.step_reward = step_reward
        self.goal_reward = goal_reward
        self.max_steps = max_steps
        self.n_cells = width * height
        self.goal_cell = self.goal[1] * width + self.goal[0]
        self._moves = ((0, -1), (0, 1), (1, 0), (-1, 0))  # up, down, right, left
        self._cell = 0
        self._steps = 0

    n_actions = 4

    @property
    def state_dim(self) -> int:
        return self.n_cells

    def _move(self, cell: int, action: int) -> int:
        x, y = cell % self.width, cell // self.width
        dx, dy = self._moves[action]
        nx, ny = min(max(x + dx, 0), self.width - 1), min(max(y + dy, 0), self.height - 1)
        return ny * self.width + nx

    def _one_hot(self, cell: int) -> np.ndarray:
        s = np.zeros(self.n_cells)
        s[cell] = 1.0
        return s

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._start(seed)
        while True:
            cell = int(self._rng.integers(self.n_cells))
            if cell != self.goal_cell:
                break
        self._cell = cell
        self._steps = 0
        return self._one_hot(cell)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self._guard()
        if not 0 <= action < 4:
            raise ValueError("action must be in 0..3")
        executed = action
        if self.slip > 0 and self._rng.random() < self.slip:
            executed = int(self._rng.integers(4))
        nxt = self._move(self._cell, executed)
        self._steps += 1
        reached = nxt == self.goal_cell
        reward = self.goal_reward if reached else self.step_reward
        self._done = reached or self._steps >= self.max_steps
        self._cell = nxt
        return self._one_hot(nxt), reward, self._done

    def export_mdp(self, discount: float = 0.99) -> FiniteMdp:
        """Exact tensor with the goal as a zero-reward absorbing state."""
        n = self.n_cells
        transition = np.zeros((n, 4, n))
        reward = np.zeros((n, 4))
        for cell in range(n):
            if cell == self.goal_cell:
                transition[cell, :, cell] = 1.0
                continue
            for action in range(4):
                for executed in range(4):
                    p = (1.0 - self.slip) + self.slip / 4.0 if executed == action else self.slip / 4.0
                    nxt = self._move(cell, executed)
                    transition[cell, action, nxt] += p
                    reward[cell, action] += p * (self.goal_reward if nxt == self.goal_cell
                                                 else self.step_reward)
        initial = np.full(n, 1.0 / (n - 1))
        initial[self.goal_cell] = 0.0
        return FiniteMdp(transition=transition, reward=reward, discount=discount,
                         initial_dist=initial)


class CartPoleLikeEnv(_EpisodeGuard):
    """Pole balancing with the classic constants and Euler integration."""

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    HALF_LENGTH = 0.5
    FORCE_MAG = 10.0
    TAU = 0.02
    THETA_LIMIT = 12.0 * 2.0 * math.pi / 360.0
    X_LIMIT = 2.4

    n_actions = 2
    state_dim = 4
    max_steps = 500

    def __init__(self):
        super().__init__()
        self._state = np.zeros(4)
        self._steps = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._start(seed)
        self._state = self._rng.uniform(-0.05, 0.05, size=4)
        self._steps = 0
        return self._state.copy()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self._guard()
        if action not in (0, 1):
            raise ValueError("action must be 0 or 1")
        x, x_dot, theta, theta_dot = self._state
        force = self.FORCE_MAG if action == 1 else -self.FORCE_MAG
        total_mass = self.MASS_CART + self.MASS_POLE
        pole_mass_length = self.MASS_POLE * self.HALF_LENGTH
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        temp = (force + pole_mass_length * theta_dot ** 2 * sin_t) / total_mass
        theta_acc = (self.GRAVITY * sin_t - cos_t * temp) / (
            self.HALF_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos_t ** 2 / total_mass))
        x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass
        x += self.TAU * x_dot
        x_dot += self.TAU * x_acc
        theta += self.TAU * theta_dot
        theta_dot += self.TAU * theta_acc
        self._state = np.array([x, x_dot, theta, theta_dot])
        self._steps += 1
        fell = abs(theta) > self.THETA_LIMIT or abs(x) > self.X_LIMIT
        self._done = fell or self._steps >= self.max_steps
        return self._state.copy(), 1.0, self._done


class PointMassEnv(_EpisodeGuard):
    """Damped point mass pushed toward the origin by a 2-d force in [-1, 1]^2.

    Reward is the negative squared distance to the target each step, so the
    episode return is a control cost (always <= 0).
    """

    action_dim = 2
    state_dim = 4
    max_steps = 200
    DT = 0.1
    DAMPING = 0.85

    def __init__(self):
        super().__init__()
        self._pos = np.zeros(2)
        self._vel = np.zeros(2)
        self._steps = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._start(seed)
        self._pos = self._rng.uniform(-1.0, 1.0, size=2)
        self._vel = np.zeros(2)
        self._steps = 0
        return np.concatenate([self._pos, self._vel])

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        self._guard()
        force = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        self._vel = self.DAMPING * self._vel + self.DT * force
        self._pos = self._pos + self.DT * self._vel
        self._steps += 1
        reward = -float(np.sum(self._pos ** 2))
        self._done = self._steps >= self.max_steps
        return np.concatenate([self._pos, self._vel]), reward, self._done


ENV_IDS = ("gridworld-5x5", "cartpole", "pointmass")


def make_env(env_id: str):
    if env_id == "gridworld-5x5":
        return GridworldEnv(5, 5)
    if env_id == "cartpole":
        return CartPoleLikeEnv()
    if env_id == "pointmass":
        return PointMassEnv()
    raise ValueError(f"unknown environment id {env_id!r}; known: {', '.join(ENV_IDS)}")
