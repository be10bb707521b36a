"""Independent numerical oracle for the three proximal problems.

Maximizes the linear advantage objective over the exact constraint set with a
conic interior-point solve (cvxpy/Clarabel), then pulls the iterate radially
toward pi_k until every constraint holds within FEASIBILITY_TOL. The route
shares nothing with the closed-form solvers, so agreement certifies both.
"""

from __future__ import annotations

from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .solvers import (BACKWARD_KL, FORWARD_KL, LINF, SolverInstance,
                      instance_objective, kl_categorical)

FEASIBILITY_TOL = 1e-9


class OracleFailure(RuntimeError):
    """The numerical solve did not reach a usable optimum."""


@dataclass(frozen=True)
class OracleSolution:
    per_state_targets: list[np.ndarray]
    objective: float


def brute_force_oracle(problem: str, instance: SolverInstance, delta: float = None,
                       epsilon: float = None, seed: int = 0) -> OracleSolution:
    """Numerically maximize the instance objective over its constraint set.

    delta/epsilon default to the instance's own values. The seed argument is
    accepted for interface stability; the conic backend is deterministic.
    """
    del seed
    inst = SolverInstance(kind=problem, pi_k=instance.pi_k, adv=instance.adv,
                          delta=instance.delta if delta is None else delta,
                          epsilon=instance.epsilon if epsilon is None else epsilon,
                          d=instance.d)
    if inst.kind == FORWARD_KL:
        targets = _solve_forward(inst)
    elif inst.kind == BACKWARD_KL:
        targets = _solve_backward(inst)
    elif inst.kind == LINF:
        targets = _solve_linf(inst)
    else:
        raise ValueError(f"unknown problem kind {problem!r}")
    return OracleSolution(per_state_targets=targets,
                          objective=instance_objective(inst, targets))


def _solve(prob: cp.Problem) -> None:
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise OracleFailure(f"conic solve ended with status {prob.status}")


def _pull_rows(rows, pi_k_rows, measure, cap):
    """Shrink all rows toward pi_k along the segment until measure(rows) <= cap.

    measure is increasing along the segment (it is convex and zero at pi_k),
    so plain bisection on the interpolation parameter suffices.
    """
    if measure(rows) <= cap:
        return rows
    lo, hi = 0.0, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        cand = [p + mid * (r - p) for p, r in zip(pi_k_rows, rows)]
        if measure(cand) > cap:
            hi = mid
        else:
            lo = mid
    return [p + lo * (r - p) for p, r in zip(pi_k_rows, rows)]


def _solve_forward(inst: SolverInstance) -> list[np.ndarray]:
    supports = [row > 0 for row in inst.pi_k]
    variables = [cp.Variable(int(sup.sum()), nonneg=True) for sup in supports]
    kl_terms = [cp.sum(cp.kl_div(x, p[sup]))
                for x, p, sup in zip(variables, inst.pi_k, supports)]
    constraints = [cp.sum(x) == 1 for x in variables]
    constraints += [k <= inst.epsilon for k in kl_terms]
    constraints.append(
        cp.sum(cp.hstack([w * k for w, k in zip(inst.d, kl_terms)])) <= inst.delta)
    objective = cp.sum(cp.hstack(
        [w * (a[sup] @ x) for w, a, sup, x in zip(inst.d, inst.adv, supports, variables)]))
    _solve(cp.Problem(cp.Maximize(objective), constraints))

    rows = []
    for x, p, sup in zip(variables, inst.pi_k, supports):
        full = np.zeros_like(p)
        vals = np.maximum(np.asarray(x.value, dtype=np.float64), 0.0)
        full[sup] = vals / vals.sum()
        rows.append(full)

    # interior-point output may violate the caps by ~1e-9; restore exactly
    for s in range(len(rows)):
        rows[s] = _pull_rows([rows[s]], [inst.pi_k[s]],
                             lambda r, s=s: kl_categorical(r[0], inst.pi_k[s]),
                             inst.epsilon)[0]
    rows = _pull_rows(rows, inst.pi_k,
                      lambda r: sum(w * kl_categorical(t, p)
                                    for w, t, p in zip(inst.d, r, inst.pi_k)),
                      inst.delta)
    return rows


def _solve_backward(inst: SolverInstance) -> list[np.ndarray]:
    if any(np.any(row <= 0) for row in inst.pi_k):
        raise ValueError("backward-kl oracle requires full-support pi_k rows")
    rows = []
    for p, a in zip(inst.pi_k, inst.adv):
        x = cp.Variable(p.size, pos=True)
        prob = cp.Problem(cp.Maximize(a @ x),
                          [cp.sum(x) == 1, cp.sum(cp.kl_div(p, x)) <= inst.epsilon])
        _solve(prob)
        row = np.maximum(np.asarray(x.value, dtype=np.float64), 1e-300)
        row = row / row.sum()
        row = _pull_rows([row], [p], lambda r: kl_categorical(p, r[0]), inst.epsilon)[0]
        rows.append(row)
    return rows


def _solve_linf(inst: SolverInstance) -> list[np.ndarray]:
    pi_k, adv = inst.pi_k[0], inst.adv[0]
    u = cp.Variable(pi_k.size)  # u_i = (pi_i - pi_k_i) / pi_k_i
    prob = cp.Problem(cp.Maximize(adv @ u),
                      [cp.abs(u) <= inst.epsilon,
                       cp.sum_squares(u) <= inst.delta])
    _solve(prob)
    vals = np.clip(np.asarray(u.value, dtype=np.float64), -inst.epsilon, inst.epsilon)
    norm2 = float(np.sum(vals ** 2))
    if norm2 > inst.delta:
        vals *= np.sqrt(inst.delta / norm2)
    return [pi_k * (1.0 + vals)]


def feasibility_residuals(inst: SolverInstance, targets: list[np.ndarray]) -> dict:
    """Constraint violations of a candidate solution (positive = violated)."""
    if inst.kind == LINF:
        u = (targets[0] - inst.pi_k[0]) / inst.pi_k[0]
        return {"box": float(np.max(np.abs(u)) - inst.epsilon),
                "aggregate": float(np.sum(u ** 2) - inst.delta)}
    per_state = [kl_categorical(t, p) if inst.kind == FORWARD_KL else kl_categorical(p, t)
                 for t, p in zip(targets, inst.pi_k)]
    out = {"per_state": float(max(k - inst.epsilon for k in per_state)),
           "rows": float(max(abs(t.sum() - 1.0) for t in targets))}
    if inst.kind == FORWARD_KL:
        out["aggregate"] = float(sum(w * k for w, k in zip(inst.d, per_state)) - inst.delta)
    return out
