"""Training loop: rollout collection, GAE, critic fitting, and the three
supervised policy-update rules with per-state acceptance and dynamic stopping.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from .nets import AdamState, CategoricalPolicyNet, GaussianPolicyNet, ValueNet, adam_step
from .solvers import CONSTRAINT_KINDS, FORWARD_KL, BACKWARD_KL, LINF, solve_linf

RATIO_LOG_CAP = 30.0  # log-prob gaps above this mark a sample as numerically unusable


class ConfigError(ValueError):
    """Invalid configuration value; carries the offending field name."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


@dataclass
class SpuConfig:
    """Hyperparameters for one training run. JSON key 'lambda' maps to `lam`."""

    delta: float = 0.05 / 1.2
    epsilon: float = 0.05
    lam: float = 1.3
    zeta: int = 30
    gamma: float = 0.99
    gae_beta: float = 0.95
    learn_rate: float = 3e-4
    minibatch: int = 64
    steps_per_iter: int = 2048
    constraint_kind: str = FORWARD_KL
    no_grad_kl: bool = False
    no_dynamic_stopping: bool = False
    no_per_state_acceptance: bool = False
    seed: int = 0
    anneal_lr: bool = True
    total_iters: int = 200
    lambda_prime: float | None = None

    _ABLATIONS = ("no_grad_kl", "no_dynamic_stopping", "no_per_state_acceptance")

    def validate(self) -> None:
        for name in ("delta", "epsilon", "lam"):
            if getattr(self, name) <= 0:
                raise ConfigError("lambda" if name == "lam" else name, "must be positive")
        if self.learn_rate < 0:
            raise ConfigError("learn_rate", "must be nonnegative")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma", "must lie in (0, 1)")
        if not 0 <= self.gae_beta <= 1:
            raise ConfigError("gae_beta", "must lie in [0, 1]")
        if self.zeta < 1:
            raise ConfigError("zeta", "must be at least 1")
        if self.minibatch < 1:
            raise ConfigError("minibatch", "must be at least 1")
        if self.steps_per_iter < 1:
            raise ConfigError("steps_per_iter", "must be at least 1")
        if self.total_iters < 1:
            raise ConfigError("total_iters", "must be at least 1")
        if self.constraint_kind not in CONSTRAINT_KINDS:
            raise ConfigError("constraint_kind",
                              f"must be one of {', '.join(CONSTRAINT_KINDS)}")
        if self.lambda_prime is not None and not math.isfinite(self.lambda_prime):
            raise ConfigError("lambda_prime", "must be finite or null")

    def to_json_dict(self) -> dict:
        doc = {}
        for f in fields(self):
            if f.name in self._ABLATIONS:
                continue
            key = "lambda" if f.name == "lam" else f.name
            doc[key] = getattr(self, f.name)
        doc["ablations"] = {name: getattr(self, name) for name in self._ABLATIONS}
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SpuConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            if key == "ablations":
                for name, flag in value.items():
                    if name not in cls._ABLATIONS:
                        raise ConfigError(name, "unknown ablation switch")
                    kwargs[name] = bool(flag)
            elif key == "lambda":
                kwargs["lam"] = value
            elif key in known and key not in cls._ABLATIONS:
                kwargs[key] = value
            else:
                raise ConfigError(key, "unknown config field")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class RunningNormalizer:
    """Streaming mean/variance (Welford); apply() shifts and scales a state."""

    dim: int
    count: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return np.asarray(x, dtype=np.float64).copy()
        std = np.sqrt(self.m2 / self.count)
        return (np.asarray(x, dtype=np.float64) - self.mean) / np.maximum(std, 1e-8)


@dataclass
class RolloutBatch:
    """Per-step rollout records plus GAE outputs once computed."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    bootstrap_value: float | None
    advantages: np.ndarray = None
    value_targets: np.ndarray = None

    def __len__(self) -> int:
        return len(self.rewards)


def compute_gae(batch: RolloutBatch, gamma: float, gae_beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-scan GAE; value targets are advantages plus values."""
    n = len(batch)
    if not batch.dones[-1] and batch.bootstrap_value is None:
        raise ValueError("unfinished trajectory requires a bootstrap value")
    if not np.all(np.isfinite(batch.log_probs)):
        raise ValueError("log-probs must be finite")
    adv = np.zeros(n)
    gae = 0.0
    next_value = batch.bootstrap_value if batch.bootstrap_value is not None else 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if batch.dones[t] else 1.0
        delta = batch.rewards[t] + gamma * next_value * nonterminal - batch.values[t]
        gae = delta + gamma * gae_beta * nonterminal * gae
        adv[t] = gae
        next_value = batch.values[t]
    targets = adv + batch.values
    batch.advantages = adv
    batch.value_targets = targets
    return adv, targets


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """Subtract the batch mean, divide by the batch (population) std."""
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size < 2:
        raise ValueError("need at least two samples to normalize")
    std = advantages.std()
    if std < 1e-8:
        return np.zeros_like(advantages)
    return (advantages - advantages.mean()) / std


@dataclass
class UpdateDiagnostics:
    """Per-minibatch bookkeeping for the trust-region metrics."""

    n_samples: int = 0
    n_over_cap: int = 0        # per-state KL above epsilon (rejected, or would-be)
    n_excluded: int = 0        # unusable ratios (log-prob gap over the cap)
    max_contributing_kl: float = 0.0
    mean_kl: float = 0.0

    def merge(self, other: "UpdateDiagnostics") -> None:
        total = self.n_samples + other.n_samples
        if total:
            self.mean_kl = (self.mean_kl * self.n_samples
                            + other.mean_kl * other.n_samples) / total
        self.n_samples = total
        self.n_over_cap += other.n_over_cap
        self.n_excluded += other.n_excluded
        self.max_contributing_kl = max(self.max_contributing_kl, other.max_contributing_kl)


def forward_kl_update_gradient(policy, policy_k, states, actions, advantages,
                               lam: float, epsilon: float, *,
                               no_grad_kl: bool = False,
                               no_per_state_acceptance: bool = False,
                               ref_dist=None, ref_log_probs=None):
    """Supervised gradient for the forward-KL projection.

    Per sample: [grad KL(pi||pi_k)[s_i] - (A_i / lam) grad ratio_i] gated by
    the per-state cap KL <= epsilon, averaged over the minibatch. The cap is
    evaluated at the current parameters. Samples whose log-prob gap exceeds
    RATIO_LOG_CAP are dropped and counted.
    """
    m = len(states)
    dist, cache = policy.dist_batch(states)
    if ref_dist is None:
        ref_dist, _ = policy_k.dist_batch(states)
    if ref_log_probs is None:
        ref_log_probs = policy_k.log_prob_from(ref_dist, actions)
    log_gap = policy.log_prob_from(dist, actions) - ref_log_probs
    usable = log_gap <= RATIO_LOG_CAP
    ratio = np.where(usable, np.exp(np.minimum(log_gap, RATIO_LOG_CAP)), 0.0)
    kl = policy.kl_from(dist, ref_dist)

    over_cap = kl > epsilon
    accepted = usable if no_per_state_acceptance else (usable & ~over_cap)
    w_kl = np.where(accepted, 1.0 / m, 0.0)
    w_logp = -np.where(accepted, ratio * np.asarray(advantages) / (lam * m), 0.0)
    if no_grad_kl:
        w_kl = np.zeros(m)
    grad = policy.grad_accumulate(cache, dist, ref_dist, actions, w_kl, w_logp)
    diag = UpdateDiagnostics(
        n_samples=m,
        n_over_cap=int(over_cap.sum()),
        n_excluded=int((~usable).sum()),
        max_contributing_kl=float(kl[accepted].max()) if accepted.any() else 0.0,
        mean_kl=float(kl.mean()),
    )
    return grad, diag


def backward_kl_update_gradient(policy, policy_k, states, actions, advantages,
                                lambda_prime, *, ref_dist=None, ref_log_probs=None):
    """Supervised gradient for the backward-KL projection.

    Per sample: grad KL(pi||pi_k)[s_i] - ratio_i log(1/(lambda' - A_i))
    grad log pi(a_i|s_i), averaged over the minibatch. lambda_prime may be a
    scalar or one value per sample and must exceed every advantage.
    """
    m = len(states)
    advantages = np.asarray(advantages, dtype=np.float64)
    lp = np.broadcast_to(np.asarray(lambda_prime, dtype=np.float64), advantages.shape)
    if np.any(lp <= advantages):
        raise ValueError("lambda_prime must exceed every advantage in the minibatch")
    dist, cache = policy.dist_batch(states)
    if ref_dist is None:
        ref_dist, _ = policy_k.dist_batch(states)
    if ref_log_probs is None:
        ref_log_probs = policy_k.log_prob_from(ref_dist, actions)
    ratio = np.exp(policy.log_prob_from(dist, actions) - ref_log_probs)
    kl = policy.kl_from(dist, ref_dist)

    coef = -np.log(lp - advantages)  # log(1/(lambda' - A))
    w_kl = np.full(m, 1.0 / m)
    w_logp = -ratio * coef / m
    grad = policy.grad_accumulate(cache, dist, ref_dist, actions, w_kl, w_logp)
    diag = UpdateDiagnostics(n_samples=m, n_over_cap=0, n_excluded=0,
                             max_contributing_kl=float(kl.max()),
                             mean_kl=float(kl.mean()))
    return grad, diag


def linf_update_gradient(policy, policy_k, states, actions, targets, *, ref_dist=None):
    """Gradient of the mean squared error between current action probabilities
    (densities for Gaussian heads) and the fixed per-sample targets."""
    m = len(states)
    dist, cache = policy.dist_batch(states)
    if ref_dist is None:
        ref_dist, _ = policy_k.dist_batch(states)
    probs = policy.prob_from(dist, actions)
    kl = policy.kl_from(dist, ref_dist)
    w_logp = 2.0 * (probs - np.asarray(targets)) * probs / m  # d/dtheta p = p dlogp
    grad = policy.grad_accumulate(cache, dist, ref_dist, actions, np.zeros(m), w_logp)
    diag = UpdateDiagnostics(n_samples=m, n_over_cap=0, n_excluded=0,
                             max_contributing_kl=float(kl.max()),
                             mean_kl=float(kl.mean()))
    return grad, diag


def fit_critic(critic: ValueNet, adam_state: AdamState, states, targets,
               lr_scale: float = 1.0) -> tuple[float, AdamState]:
    """One Adam step on the minibatch value MSE; returns the pre-step loss."""
    targets = np.asarray(targets, dtype=np.float64)
    values, cache = critic.value_batch(states)
    residual = values - targets
    loss = float(np.mean(residual ** 2))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite critic loss")
    grad = critic.grad_weighted(cache, 2.0 * residual / len(targets))
    params, adam_state = adam_step(critic.get_params(), grad, adam_state, lr_scale)
    critic.set_params(params)
    return loss, adam_state


@dataclass
class IterationMetrics:
    iteration: int
    steps: int
    mean_return_100: float
    mean_kl_stop: float
    epochs_used: int
    reject_frac: float
    critic_loss: float
    lr: float
    wall_clock: float
    max_accepted_kl: float

    CSV_FIELDS = ("iter", "steps", "mean_return_100", "mean_kl_stop",
                  "epochs_used", "reject_frac", "critic_loss", "lr")

    def csv_row(self) -> str:
        vals = (self.iteration, self.steps, self.mean_return_100, self.mean_kl_stop,
                self.epochs_used, self.reject_frac, self.critic_loss, self.lr)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


def build_policy(env, config: SpuConfig):
    """Categorical head for discrete action spaces, Gaussian otherwise."""
    seeds = _derived_seeds(config.seed)
    if hasattr(env, "n_actions"):
        return CategoricalPolicyNet(env.state_dim, env.n_actions, seed=seeds["policy"])
    return GaussianPolicyNet(env.state_dim, env.action_dim, seed=seeds["policy"])


def build_critic(env, config: SpuConfig) -> ValueNet:
    return ValueNet(env.state_dim, seed=_derived_seeds(config.seed)["critic"])


def _derived_seeds(seed: int) -> dict:
    keys = np.random.SeedSequence(seed).spawn(5)
    names = ("env", "policy", "critic", "sample", "shuffle")
    return {name: int(key.generate_state(1)[0]) for name, key in zip(names, keys)}


class SpuTrainer:
    """Owns one training run: environment, policy, critic, optimizer state."""

    def __init__(self, env, policy, critic, config: SpuConfig):
        config.validate()
        self.env = env
        self.policy = policy
        self.critic = critic
        self.config = config
        seeds = _derived_seeds(config.seed)
        self._env_seed = seeds["env"]
        self._sample_rng = np.random.default_rng(seeds["sample"])
        self._shuffle_rng = np.random.default_rng(seeds["shuffle"])
        self.adam_policy = AdamState.init(policy.n_params, alpha=config.learn_rate)
        self.adam_critic = AdamState.init(critic.n_params, alpha=config.learn_rate)
        self.normalizer = RunningNormalizer(dim=env.state_dim)
        self.episode_returns: deque = deque(maxlen=100)
        self.iteration = 0
        self.total_steps = 0
        self._pending_raw_state = None
        self._episode_total = 0.0

    # -- rollout collection ---------------------------------------------------
    def collect_rollout(self) -> RolloutBatch:
        cfg = self.config
        n = cfg.steps_per_iter
        discrete = hasattr(self.policy, "n_actions")
        states = np.empty((n, self.env.state_dim))
        actions = (np.empty(n, dtype=np.int64) if discrete
                   else np.empty((n, self.policy.action_dim)))
        rewards = np.empty(n)
        dones = np.empty(n, dtype=bool)
        log_probs = np.empty(n)

        raw = self._pending_raw_state
        if raw is None:
            raw = self.env.reset(seed=self._env_seed)
        for t in range(n):
            self.normalizer.update(raw)
            x = self.normalizer.apply(raw)
            action, logp = self.policy.sample(x, self._sample_rng)
            nxt, reward, done = self.env.step(action)
            states[t] = x
            actions[t] = action
            rewards[t] = reward
            dones[t] = done
            log_probs[t] = logp
            self._episode_total += reward
            if done:
                self.episode_returns.append(self._episode_total)
                self._episode_total = 0.0
                raw = self.env.reset()
            else:
                raw = nxt
        self._pending_raw_state = raw
        self.total_steps += n

        values = self.critic.value_batch(states)[0]
        if dones[-1]:
            bootstrap = 0.0
        else:
            bootstrap = float(self.critic.value_batch(
                self.normalizer.apply(raw)[None, :])[0][0])
        return RolloutBatch(states=states, actions=actions, rewards=rewards,
                            dones=dones, log_probs=log_probs, values=values,
                            bootstrap_value=bootstrap)

    # -- one full iteration of the training loop ------------------------------
    def run_iteration(self) -> IterationMetrics:
        cfg = self.config
        started = time.perf_counter()
        batch = self.collect_rollout()
        compute_gae(batch, cfg.gamma, cfg.gae_beta)
        adv = normalize_advantages(batch.advantages)

        policy_k = self.policy.clone()
        ref_dist, _ = policy_k.dist_batch(batch.states)
        ref_log_probs = batch.log_probs  # sampled under the frozen policy

        lr_scale = self._lr_scale()
        if cfg.constraint_kind == LINF:
            pi_k_vals = np.exp(batch.log_probs)
            linf_targets = solve_linf(pi_k_vals, adv, cfg.lam, cfg.epsilon).target_probs
        if cfg.constraint_kind == BACKWARD_KL:
            lambda_prime = (cfg.lambda_prime if cfg.lambda_prime is not None
                            else float(adv.max()) + 1.0)

        n = len(batch)
        diag_total = UpdateDiagnostics()
        critic_losses = []
        epochs_used = 0
        mean_kl = 0.0
        for _ in range(cfg.zeta):
            perm = self._shuffle_rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = perm[start:start + cfg.minibatch]
                loss, self.adam_critic = fit_critic(
                    self.critic, self.adam_critic, batch.states[idx],
                    batch.value_targets[idx], lr_scale)
                critic_losses.append(loss)

                ref_slice = self.policy.slice_dist(ref_dist, idx)
                if cfg.constraint_kind == FORWARD_KL:
                    grad, diag = forward_kl_update_gradient(
                        self.policy, policy_k, batch.states[idx], batch.actions[idx],
                        adv[idx], cfg.lam, cfg.epsilon,
                        no_grad_kl=cfg.no_grad_kl,
                        no_per_state_acceptance=cfg.no_per_state_acceptance,
                        ref_dist=ref_slice, ref_log_probs=ref_log_probs[idx])
                elif cfg.constraint_kind == BACKWARD_KL:
                    grad, diag = backward_kl_update_gradient(
                        self.policy, policy_k, batch.states[idx], batch.actions[idx],
                        adv[idx], lambda_prime,
                        ref_dist=ref_slice, ref_log_probs=ref_log_probs[idx])
                else:
                    grad, diag = linf_update_gradient(
                        self.policy, policy_k, batch.states[idx], batch.actions[idx],
                        linf_targets[idx], ref_dist=ref_slice)
                diag_total.merge(diag)
                params, self.adam_policy = adam_step(
                    self.policy.get_params(), grad, self.adam_policy, lr_scale)
                self.policy.set_params(params)

            epochs_used += 1
            dist_now, _ = self.policy.dist_batch(batch.states)
            mean_kl = float(self.policy.kl_from(dist_now, ref_dist).mean())
            if not cfg.no_dynamic_stopping and mean_kl > cfg.delta:
                break

        self.iteration += 1
        metrics = IterationMetrics(
            iteration=self.iteration,
            steps=self.total_steps,
            mean_return_100=(float(np.mean(self.episode_returns))
                             if self.episode_returns else float("nan")),
            mean_kl_stop=mean_kl,
            epochs_used=epochs_used,
            reject_frac=((diag_total.n_over_cap + diag_total.n_excluded)
                         / max(diag_total.n_samples, 1)),
            critic_loss=float(np.mean(critic_losses)),
            lr=cfg.learn_rate * lr_scale,
            wall_clock=time.perf_counter() - started,
            max_accepted_kl=diag_total.max_contributing_kl,
        )
        return metrics

    def run(self, n_iters: int) -> list[IterationMetrics]:
        return [self.run_iteration() for _ in range(n_iters)]

    def _lr_scale(self) -> float:
        if not self.config.anneal_lr:
            return 1.0
        return max(0.0, 1.0 - self.iteration / self.config.total_iters)


def build_trainer(env, config: SpuConfig) -> SpuTrainer:
    """Environment plus freshly initialized networks, all seeded from config.seed."""
    return SpuTrainer(env, build_policy(env, config), build_critic(env, config), config)
