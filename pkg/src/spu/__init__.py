"""Supervised policy update: exact proximal solvers, supervised projection, training loop."""

from .tabular import (FiniteMdp, StateDistribution, SupportViolationError,
                      TabularPolicy, aggregated_kl, exact_advantage, exact_return,
                      exact_state_distribution, surrogate_objective, value_iteration)
from .solvers import (BackwardKlSolution, ForwardKlSolution, LinfLambda, LinfSolution,
                      SolverInstance, forward_kl_tilt, kl_categorical, solve_backward_kl,
                      solve_forward_kl, solve_linf, solve_linf_lambda,
                      solve_per_state_lambda)
from .oracle import OracleSolution, brute_force_oracle
from .nets import (AdamState, CategoricalPolicyNet, GaussianPolicyNet, Mlp, ValueNet,
                   adam_step, kl_between, load_params, log_prob, save_params)
from .envs import CartPoleLikeEnv, GridworldEnv, PointMassEnv, make_env
from .training import (ConfigError, IterationMetrics, RolloutBatch, RunningNormalizer,
                       SpuConfig, SpuTrainer, build_trainer, compute_gae,
                       fit_critic, normalize_advantages)

__all__ = [
    "FiniteMdp", "TabularPolicy", "StateDistribution", "SupportViolationError",
    "exact_return", "exact_state_distribution", "exact_advantage",
    "surrogate_objective", "aggregated_kl", "value_iteration",
    "forward_kl_tilt", "solve_per_state_lambda", "solve_forward_kl",
    "solve_backward_kl", "solve_linf", "solve_linf_lambda", "kl_categorical",
    "ForwardKlSolution", "BackwardKlSolution", "LinfSolution", "LinfLambda",
    "SolverInstance", "brute_force_oracle", "OracleSolution",
    "Mlp", "CategoricalPolicyNet", "GaussianPolicyNet", "ValueNet", "AdamState",
    "adam_step", "log_prob", "kl_between", "save_params", "load_params",
    "GridworldEnv", "CartPoleLikeEnv", "PointMassEnv", "make_env",
    "SpuConfig", "SpuTrainer", "ConfigError", "IterationMetrics", "RolloutBatch",
    "RunningNormalizer", "build_trainer", "compute_gae", "fit_critic",
    "normalize_advantages",
]
