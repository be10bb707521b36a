"""Closed-form optimal non-parameterized policies for the three proximity constraints.

Each solver returns the exact optimizer of the linear advantage objective over
one constraint set: forward-KL with an aggregate budget and per-state caps,
per-state backward-KL, or a per-sample ratio box with a quadratic budget. Dual
variables are located by bisection on monotone scalar equations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tabular import SupportViolationError

LAMBDA_LO = 1e-8
LAMBDA_HI = 1e8
BISECT_MAX_ITER = 200
RESIDUAL_TOL = 1e-10


def kl_categorical(p: np.ndarray, q: np.ndarray) -> float:
    """sum_a p(a) log(p(a)/q(a)) with 0 log 0 := 0; errors if p charges outside q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same length")
    if np.any((p > 0) & (q == 0)):
        raise SupportViolationError("p has mass where q is zero")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def forward_kl_tilt(pi_k: np.ndarray, adv: np.ndarray, lam: float) -> np.ndarray:
    """Normalized pi_k(a) exp(A(a)/lam); zero entries of pi_k stay zero.

    Computed with a shifted exponent (subtract max(A/lam) over the support)
    so arbitrarily small lam stays finite.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    pi_k = np.asarray(pi_k, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if not np.all(np.isfinite(adv)):
        raise ValueError("advantages must be finite")
    support = pi_k > 0
    z = adv[support] / lam
    w = pi_k[support] * np.exp(z - z.max())
    out = np.zeros_like(pi_k)
    out[support] = w / w.sum()
    return out


def _max_achievable_kl(pi_k: np.ndarray, adv: np.ndarray) -> float:
    """Limit of KL(tilt || pi_k) as lam -> 0+: -log of the argmax-advantage mass."""
    support = pi_k > 0
    a = adv[support]
    mass = pi_k[support][a >= a.max() - 1e-15 * max(1.0, abs(a.max()))].sum()
    return -math.log(mass)


def _bisect_decreasing(f, lo: float, hi: float,
                       max_iter: int = BISECT_MAX_ITER, tol: float = RESIDUAL_TOL) -> float:
    """Root of a decreasing f on [lo, hi] by bisection in log space.

    Expands hi geometrically first if f(hi) is still positive. Caller must
    ensure f(lo) >= 0.
    """
    while f(hi) > 0 and hi < 1e16:
        hi *= 10.0
    mid = math.sqrt(lo * hi)
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        v = f(mid)
        if abs(v) <= tol:
            return mid
        if v > 0:
            lo = mid
        else:
            hi = mid
    return mid


def solve_per_state_lambda(pi_k: np.ndarray, adv: np.ndarray, epsilon: float) -> float | None:
    """lam_s with KL(tilt(pi_k, adv, lam_s) || pi_k) = epsilon.

    Returns None when the cap can never bind, i.e. the lam -> 0+ supremum of
    the achievable KL is already below epsilon (constant advantages included).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pi_k = np.asarray(pi_k, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)

    def residual(lam: float) -> float:
        return kl_categorical(forward_kl_tilt(pi_k, adv, lam), pi_k) - epsilon

    if residual(LAMBDA_LO) < 0:
        return None
    return _bisect_decreasing(residual, LAMBDA_LO, LAMBDA_HI)


@dataclass(frozen=True)
class ForwardKlSolution:
    """Piecewise tilt solution: per-state targets, the aggregate dual lam,
    the effective per-state duals, cap membership, and a slack flag set when
    even lam -> 0+ cannot spend the aggregate budget."""

    per_state_targets: list[np.ndarray]
    lam: float
    per_state_lambda: np.ndarray
    in_gamma: np.ndarray
    aggregate_slack: bool

    def objective(self, d_weights: np.ndarray, adv_rows: list[np.ndarray]) -> float:
        return float(sum(d * (t @ a) for d, t, a in
                         zip(d_weights, self.per_state_targets, adv_rows)))


def solve_forward_kl(d_weights: np.ndarray, pi_k_rows: list[np.ndarray],
                     adv_rows: list[np.ndarray], delta: float,
                     epsilon: float) -> ForwardKlSolution:
    """Optimal policy under the aggregate budget delta and per-state caps epsilon.

    For a candidate aggregate dual lam, each state uses the tilt at lam if that
    already satisfies its cap, otherwise the tilt at its own lam_s (cap binding).
    lam is bisected so the weighted KL sum spends delta; when the budget is
    unreachable the saturated solution is returned with aggregate_slack set.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = len(pi_k_rows)
    if n == 0:
        raise ValueError("at least one state is required")
    if len(adv_rows) != n or len(d_weights) != n:
        raise ValueError("d_weights, pi_k_rows and adv_rows must have equal length")
    d_weights = np.asarray(d_weights, dtype=np.float64)
    pi_k_rows = [np.asarray(r, dtype=np.float64) for r in pi_k_rows]
    adv_rows = [np.asarray(r, dtype=np.float64) for r in adv_rows]

    lam_caps = [solve_per_state_lambda(p, a, epsilon) for p, a in zip(pi_k_rows, adv_rows)]

    def targets_at(lam: float) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
        rows, eff, member = [], np.empty(n), np.empty(n, dtype=bool)
        for s in range(n):
            cap = lam_caps[s]
            inside = cap is None or lam >= cap
            eff[s] = lam if inside else cap
            member[s] = inside
            rows.append(forward_kl_tilt(pi_k_rows[s], adv_rows[s], eff[s]))
        return rows, eff, member

    def weighted_kl(lam: float) -> float:
        rows, _, _ = targets_at(lam)
        return float(sum(d_weights[s] * kl_categorical(rows[s], pi_k_rows[s])
                         for s in range(n)))

    if weighted_kl(LAMBDA_LO) < delta:
        rows, eff, member = targets_at(LAMBDA_LO)
        return ForwardKlSolution(rows, LAMBDA_LO, eff, member, aggregate_slack=True)

    lam = _bisect_decreasing(lambda x: weighted_kl(x) - delta, LAMBDA_LO, LAMBDA_HI)
    rows, eff, member = targets_at(lam)
    return ForwardKlSolution(rows, lam, eff, member, aggregate_slack=False)


@dataclass(frozen=True)
class BackwardKlSolution:
    """Reciprocal-form target pi_k(a) lambda_norm / (lambda_prime - A(a)).

    slack is set when the constraint cannot bind (constant advantages or a
    single-action simplex); the target is then pi_k itself.
    """

    target: np.ndarray
    lambda_prime: float
    lambda_norm: float
    slack: bool = False


def solve_backward_kl(pi_k: np.ndarray, adv: np.ndarray, epsilon: float) -> BackwardKlSolution:
    """Optimal policy with KL(pi_k || pi) <= epsilon binding.

    Bisects the dual lambda_prime on (max A, inf); normalization fixes
    lambda_norm = 1 / sum_a pi_k(a)/(lambda_prime - A(a)). Requires pi_k with
    full support (restrict to the support first).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pi_k = np.asarray(pi_k, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if np.any(pi_k <= 0):
        raise ValueError("pi_k must have full support; drop zero-probability actions first")

    a_max = float(adv.max())
    if pi_k.size == 1 or np.ptp(adv) == 0.0:
        return BackwardKlSolution(target=pi_k.copy(), lambda_prime=a_max + 1.0,
                                  lambda_norm=1.0, slack=True)

    def point(offset: float) -> tuple[np.ndarray, float]:
        gaps = (a_max - adv) + offset
        weights = pi_k / gaps
        norm = 1.0 / weights.sum()
        return weights * norm, norm

    def residual(offset: float) -> float:
        target, _ = point(offset)
        return kl_categorical(pi_k, target) - epsilon

    scale = max(1.0, float(np.abs(adv).max()))
    lo = 1e-14 * scale
    while residual(lo) < 0:
        lo /= 1e3
        if lo < 1e-280:
            raise ValueError("epsilon exceeds the numerically achievable backward KL")
    hi = scale
    while residual(hi) > 0 and hi < 1e18:
        hi *= 10.0
    offset = math.sqrt(lo * hi)
    for _ in range(BISECT_MAX_ITER):
        offset = math.sqrt(lo * hi)
        v = residual(offset)
        if abs(v) <= RESIDUAL_TOL:
            break
        if v > 0:
            lo = offset
        else:
            hi = offset
    target, norm = point(offset)
    return BackwardKlSolution(target=target, lambda_prime=a_max + offset, lambda_norm=norm)


@dataclass(frozen=True)
class LinfSolution:
    """Per-sample clipped targets pi_k_i (1 + clip(lam A_i, -eps, eps))."""

    target_probs: np.ndarray
    lam: float


def solve_linf(pi_k_vals: np.ndarray, advs: np.ndarray, lam: float, epsilon: float) -> LinfSolution:
    """Clipped ratio update per sample; lam may be math.inf (full clipping)."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    pi_k_vals = np.asarray(pi_k_vals, dtype=np.float64)
    advs = np.asarray(advs, dtype=np.float64)
    if np.any(pi_k_vals <= 0):
        raise ValueError("pi_k values must be strictly positive")
    if math.isinf(lam):
        scaled = np.sign(advs) * epsilon  # full clipping
    else:
        scaled = lam * advs
    targets = pi_k_vals * (1.0 + np.clip(scaled, -epsilon, epsilon))
    return LinfSolution(target_probs=targets, lam=lam)


@dataclass(frozen=True)
class LinfLambda:
    """Dual for the quadratic ratio budget; slack means full clipping (lam -> inf)."""

    value: float
    slack: bool


def solve_linf_lambda(pi_k_vals: np.ndarray, advs: np.ndarray, delta: float,
                      epsilon: float) -> LinfLambda:
    """lam with sum_i clip(lam A_i, -eps, eps)^2 = delta, or the slack sentinel
    when even full clipping cannot spend delta (all-zero advantages included)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    advs = np.asarray(advs, dtype=np.float64)
    saturated = float(np.sum(np.where(advs != 0.0, epsilon ** 2, 0.0)))
    if saturated <= delta:
        return LinfLambda(value=math.inf, slack=True)

    def residual(lam: float) -> float:
        return delta - float(np.sum(np.clip(lam * advs, -epsilon, epsilon) ** 2))

    lam = _bisect_decreasing(residual, LAMBDA_LO, LAMBDA_HI)
    return LinfLambda(value=lam, slack=False)


FORWARD_KL = "forward-kl"
BACKWARD_KL = "backward-kl"
LINF = "linf"
CONSTRAINT_KINDS = (FORWARD_KL, BACKWARD_KL, LINF)


@dataclass(frozen=True)
class SolverInstance:
    """A serializable solver problem, used to replay failing cases and by the CLI.

    For forward-kl and backward-kl, pi_k and adv are per-state rows and d holds
    the state weights. For linf, pi_k and adv are flat per-sample vectors.
    """

    kind: str
    pi_k: list[np.ndarray]
    adv: list[np.ndarray]
    delta: float
    epsilon: float
    d: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        pi_k = [np.asarray(r, dtype=np.float64) for r in self.pi_k]
        adv = [np.asarray(r, dtype=np.float64) for r in self.adv]
        if len(pi_k) != len(adv) or any(p.shape != a.shape for p, a in zip(pi_k, adv)):
            raise ValueError("pi_k and adv must have matching shapes")
        d = self.d
        if d is None:
            d = np.full(len(pi_k), 1.0 / len(pi_k))
        d = np.asarray(d, dtype=np.float64)
        if d.shape != (len(pi_k),):
            raise ValueError("d must have one weight per state")
        object.__setattr__(self, "pi_k", pi_k)
        object.__setattr__(self, "adv", adv)
        object.__setattr__(self, "d", d)

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "pi_k": [r.tolist() for r in self.pi_k],
            "adv": [r.tolist() for r in self.adv],
            "delta": self.delta,
            "epsilon": self.epsilon,
            "d": self.d.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SolverInstance":
        doc = json.loads(text)
        pi_k = doc["pi_k"]
        if pi_k and not isinstance(pi_k[0], list):
            pi_k = [pi_k]  # single row shorthand
        adv = doc["adv"]
        if adv and not isinstance(adv[0], list):
            adv = [adv]
        return cls(
            kind=doc.get("kind", FORWARD_KL),
            pi_k=[np.array(r) for r in pi_k],
            adv=[np.array(r) for r in adv],
            delta=float(doc["delta"]),
            epsilon=float(doc["epsilon"]),
            d=np.array(doc["d"]) if "d" in doc else None,
        )


def solve_instance(inst: SolverInstance) -> tuple[list[np.ndarray], float, dict]:
    """Closed-form targets, objective, and dual variables for any instance kind."""
    if inst.kind == FORWARD_KL:
        sol = solve_forward_kl(inst.d, inst.pi_k, inst.adv, inst.delta, inst.epsilon)
        duals = {"lambda": sol.lam,
                 "per_state_lambda": sol.per_state_lambda.tolist(),
                 "aggregate_slack": sol.aggregate_slack}
        targets = sol.per_state_targets
    elif inst.kind == BACKWARD_KL:
        sols = [solve_backward_kl(p, a, inst.epsilon) for p, a in zip(inst.pi_k, inst.adv)]
        duals = {"lambda_prime": [s.lambda_prime for s in sols],
                 "lambda_norm": [s.lambda_norm for s in sols],
                 "slack": [s.slack for s in sols]}
        targets = [s.target for s in sols]
    else:
        lam = solve_linf_lambda(inst.pi_k[0], inst.adv[0], inst.delta, inst.epsilon)
        sol = solve_linf(inst.pi_k[0], inst.adv[0], lam.value, inst.epsilon)
        duals = {"lambda": lam.value, "slack": lam.slack}
        targets = [sol.target_probs]
    return targets, instance_objective(inst, targets), duals


def instance_objective(inst: SolverInstance, targets: list[np.ndarray]) -> float:
    """sum_s d(s) E_target[A] for row problems; the ratio-weighted sum for linf."""
    if inst.kind == LINF:
        return float(np.sum(inst.adv[0] * targets[0] / inst.pi_k[0]))
    return float(sum(w * (t @ a) for w, t, a in zip(inst.d, targets, inst.adv)))
