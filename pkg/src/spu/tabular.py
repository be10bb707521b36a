"""Exact finite-MDP computations: returns, visitation distributions, advantages.

Everything here is solved by direct dense linear algebra so the results are
oracle-grade; these quantities anchor the solver and trainer tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ROW_ATOL = 1e-12


class SupportViolationError(ValueError):
    """Raised when a policy puts mass where the reference policy has none."""


def _check_rows_on_simplex(rows: np.ndarray, name: str, atol: float = ROW_ATOL) -> None:
    if np.any(rows < 0):
        raise ValueError(f"{name} has negative entries")
    sums = rows.sum(axis=-1)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=atol):
        raise ValueError(f"{name} rows must sum to 1 (max deviation {np.abs(sums - 1).max():.3e})")


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP: transition P[s, a, s'], reward r[s, a], discount, initial distribution."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=np.float64))
        object.__setattr__(self, "reward", np.asarray(self.reward, dtype=np.float64))
        object.__setattr__(self, "initial_dist", np.asarray(self.initial_dist, dtype=np.float64))
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ValueError("transition must have shape (S, A, S)")
        s, a, _ = self.transition.shape
        if self.reward.shape != (s, a):
            raise ValueError(f"reward shape {self.reward.shape} does not match transition ({s}, {a})")
        if self.initial_dist.shape != (s,):
            raise ValueError("initial_dist length must equal the state count")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        _check_rows_on_simplex(self.transition.reshape(s * a, s), "transition")
        _check_rows_on_simplex(self.initial_dist[None, :], "initial_dist")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "FiniteMdp":
        doc = json.loads(text)
        mdp = cls(
            transition=np.array(doc["transition"], dtype=np.float64),
            reward=np.array(doc["reward"], dtype=np.float64),
            discount=float(doc["discount"]),
            initial_dist=np.array(doc["initial_dist"], dtype=np.float64),
        )
        if mdp.num_states != doc["num_states"] or mdp.num_actions != doc["num_actions"]:
            raise ValueError("declared num_states/num_actions do not match the tensors")
        return mdp


@dataclass(frozen=True)
class TabularPolicy:
    """Action probabilities pi[s, a], each row on the simplex."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 2:
            raise ValueError("probs must be a 2-d array")
        _check_rows_on_simplex(self.probs, "policy")

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class StateDistribution:
    """Discounted visitation weights over states; nonnegative, sums to 1."""

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if np.any(self.weights < -1e-12):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError("weights must sum to 1")


def _check_shapes(mdp: FiniteMdp, pol: TabularPolicy) -> None:
    if pol.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {pol.probs.shape} does not match MDP "
            f"({mdp.num_states}, {mdp.num_actions})")


def policy_transition(mdp: FiniteMdp, pol: TabularPolicy) -> np.ndarray:
    """State-to-state transition matrix P_pi[s, s'] under the policy."""
    _check_shapes(mdp, pol)
    return np.einsum("sa,sat->st", pol.probs, mdp.transition)


def state_values(mdp: FiniteMdp, pol: TabularPolicy) -> np.ndarray:
    """V solving (I - gamma P_pi) V = r_pi exactly."""
    _check_shapes(mdp, pol)
    p_pi = policy_transition(mdp, pol)
    r_pi = np.sum(pol.probs * mdp.reward, axis=1)
    lhs = np.eye(mdp.num_states) - mdp.discount * p_pi
    return np.linalg.solve(lhs, r_pi)


def exact_return(mdp: FiniteMdp, pol: TabularPolicy) -> float:
    """J(pi) = initial_dist . V, with V from the Bellman linear system."""
    return float(mdp.initial_dist @ state_values(mdp, pol))


def exact_state_distribution(mdp: FiniteMdp, pol: TabularPolicy) -> StateDistribution:
    """Solve d = (1 - gamma) rho + gamma P_pi^T d exactly."""
    _check_shapes(mdp, pol)
    p_pi = policy_transition(mdp, pol)
    lhs = np.eye(mdp.num_states) - mdp.discount * p_pi.T
    d = np.linalg.solve(lhs, (1.0 - mdp.discount) * mdp.initial_dist)
    return StateDistribution(weights=d)


def action_values(mdp: FiniteMdp, pol: TabularPolicy) -> np.ndarray:
    """Q[s, a] = r[s, a] + gamma sum_s' P[s, a, s'] V[s']."""
    v = state_values(mdp, pol)
    return mdp.reward + mdp.discount * mdp.transition @ v


def exact_advantage(mdp: FiniteMdp, pol: TabularPolicy) -> np.ndarray:
    """A = Q - V; satisfies sum_a pi(a|s) A[s, a] = 0 per state."""
    v = state_values(mdp, pol)
    q = mdp.reward + mdp.discount * mdp.transition @ v
    return q - v[:, None]


def _check_support(pol: TabularPolicy, pol_k: TabularPolicy) -> None:
    bad = (pol.probs > 0) & (pol_k.probs == 0)
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        raise SupportViolationError(
            f"policy has mass at state {s}, action {a} where the reference policy has none")


def surrogate_objective(mdp: FiniteMdp, pol_k: TabularPolicy, pol: TabularPolicy) -> float:
    """Importance-weighted advantage expectation under d^{pi_k}, scaled by 1/(1-gamma)."""
    _check_shapes(mdp, pol_k)
    _check_shapes(mdp, pol)
    _check_support(pol, pol_k)
    d = exact_state_distribution(mdp, pol_k).weights
    adv = exact_advantage(mdp, pol_k)
    # pi_k (pi/pi_k) A collapses to pi A; zero-support entries contribute nothing
    per_state = np.sum(pol.probs * adv, axis=1)
    return float(d @ per_state / (1.0 - mdp.discount))


def aggregated_kl(mdp: FiniteMdp, pol: TabularPolicy, pol_k: TabularPolicy) -> float:
    """d^{pi_k}-weighted sum of per-state KL(pi(.|s) || pi_k(.|s))."""
    _check_shapes(mdp, pol)
    _check_shapes(mdp, pol_k)
    _check_support(pol, pol_k)
    d = exact_state_distribution(mdp, pol_k).weights
    p, q = pol.probs, pol_k.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    return float(d @ terms.sum(axis=1))


def value_iteration(mdp: FiniteMdp, tol: float = 1e-12, max_iter: int = 100_000) -> tuple[np.ndarray, TabularPolicy]:
    """Optimal values and a greedy deterministic policy (lowest index wins ties)."""
    v = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        q = mdp.reward + mdp.discount * mdp.transition @ v
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    q = mdp.reward + mdp.discount * mdp.transition @ v
    greedy = q.argmax(axis=1)
    probs = np.zeros((mdp.num_states, mdp.num_actions))
    probs[np.arange(mdp.num_states), greedy] = 1.0
    return v, TabularPolicy(probs=probs)


def undiscounted_finite_horizon_return(mdp: FiniteMdp, pol: TabularPolicy, horizon: int) -> float:
    """Expected undiscounted reward over `horizon` steps from the initial distribution.

    Matches the episodic return of a step-capped environment whose terminal
    states are modelled as zero-reward self-loops.
    """
    _check_shapes(mdp, pol)
    p_pi = policy_transition(mdp, pol)
    r_pi = np.sum(pol.probs * mdp.reward, axis=1)
    v = np.zeros(mdp.num_states)
    for _ in range(horizon):
        v = r_pi + p_pi @ v
    return float(mdp.initial_dist @ v)
