"""Experiment runner: seed sweeps with reproducible manifests, a solver
inspection subcommand with an oracle cross-check, and long-format metric export.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .envs import ENV_IDS, make_env
from .oracle import brute_force_oracle, feasibility_residuals
from .solvers import CONSTRAINT_KINDS, SolverInstance, solve_instance
from .training import ConfigError, IterationMetrics, SpuConfig, build_trainer

SOLVE_GAP_LIMIT = 1e-4
CSV_HEADER = ",".join(IterationMetrics.CSV_FIELDS)


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def config_hash(cfg: SpuConfig) -> str:
    canonical = json.dumps(cfg.to_json_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _load_config(path: str | None) -> SpuConfig:
    if path is None:
        return SpuConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}")
    return SpuConfig.from_json_dict(doc)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.constraint is not None:
        cfg = replace(cfg, constraint_kind=args.constraint)
    for flag in ("no_grad_kl", "no_dynamic_stopping", "no_per_state_acceptance"):
        if getattr(args, flag):
            cfg = replace(cfg, **{flag: True})
    iters = args.iters if args.iters is not None else cfg.total_iters
    if iters < 0:
        raise UsageError("--iters must be nonnegative")
    if iters > 0:
        cfg = replace(cfg, total_iters=iters)
    cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    if args.env not in ENV_IDS:
        raise UsageError(f"unknown environment id {args.env!r}; known: {', '.join(ENV_IDS)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.seeds))
    manifest = {
        "config": cfg.to_json_dict(),
        "config_hash": config_hash(cfg),
        "env": args.env,
        "iters": iters,
        "seeds": seeds,
        "out_dir": str(out_dir),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    finals = {}
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        trainer = build_trainer(make_env(args.env), run_cfg)
        rows = [CSV_HEADER]
        final = float("nan")
        for _ in range(iters):
            metrics = trainer.run_iteration()
            rows.append(metrics.csv_row())
            final = metrics.mean_return_100
        (out_dir / f"seed_{seed}.csv").write_text("\n".join(rows) + "\n")
        finals[seed] = final

    values = [v for v in finals.values() if not np.isnan(v)]
    summary = {
        "seeds": seeds,
        "final_return_by_seed": {str(s): (None if np.isnan(v) else v)
                                 for s, v in finals.items()},
        "final_return_mean": float(np.mean(values)) if values else None,
        "final_return_std": float(np.std(values)) if values else None,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def _print_solution(label: str, targets, objective: float) -> None:
    print(f"  {label} objective: {objective!r}")
    for i, row in enumerate(targets):
        print(f"    state {i}: [{', '.join(f'{v:.6f}' for v in row)}]")


def cmd_solve(args) -> int:
    try:
        doc = json.loads(Path(args.instance).read_text())
    except FileNotFoundError:
        raise UsageError(f"instance file not found: {args.instance}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"instance file is not valid JSON: {exc}")
    docs = doc if isinstance(doc, list) else [doc]

    worst_gap = 0.0
    for i, entry in enumerate(docs):
        if args.constraint is not None:
            entry = dict(entry, kind=args.constraint)
        if args.delta is not None:
            entry = dict(entry, delta=args.delta)
        if args.epsilon is not None:
            entry = dict(entry, epsilon=args.epsilon)
        inst = SolverInstance.from_json(json.dumps(entry))
        targets, objective, duals = solve_instance(inst)
        oracle = brute_force_oracle(inst.kind, inst)
        gap = abs(objective - oracle.objective)
        worst_gap = max(worst_gap, gap)
        residuals = feasibility_residuals(inst, targets)
        if len(docs) == 1 or args.verbose:
            print(f"instance {i}: kind={inst.kind} delta={inst.delta} epsilon={inst.epsilon}")
            _print_solution("closed form", targets, objective)
            _print_solution("oracle", oracle.per_state_targets, oracle.objective)
            print(f"  duals: {json.dumps(duals)}")
            print(f"  objective gap: {gap:.3e}")
            print("  constraint residuals (positive = violated): "
                  + ", ".join(f"{k}={v:.3e}" for k, v in residuals.items()))
    print(f"{len(docs)} instance(s), max objective gap {worst_gap:.3e}, "
          f"limit {SOLVE_GAP_LIMIT:.0e}: {'OK' if worst_gap <= SOLVE_GAP_LIMIT else 'FAIL'}")
    return 0 if worst_gap <= SOLVE_GAP_LIMIT else 2


def cmd_plotdata(args) -> int:
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())

    lines = ["iteration,seed,metric,value"]
    for seed in manifest["seeds"]:
        csv_path = run_dir / f"seed_{seed}.csv"
        if not csv_path.exists():
            raise UsageError(f"missing per-seed CSV: {csv_path}")
        rows = csv_path.read_text().strip().split("\n")
        if rows[0] != CSV_HEADER:
            raise UsageError(f"corrupt CSV header in {csv_path}")
        for row in rows[1:]:
            cells = row.split(",")
            if len(cells) != len(IterationMetrics.CSV_FIELDS):
                raise UsageError(f"corrupt CSV row in {csv_path}: {row!r}")
            iteration = cells[0]
            for name, value in zip(IterationMetrics.CSV_FIELDS[1:], cells[1:]):
                lines.append(f"{iteration},{seed},{name},{value}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="spu", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run training across seeds, emit CSVs + summary")
    train.add_argument("config", nargs="?", default=None,
                       help="JSON config file (defaults used when omitted)")
    train.add_argument("--seed", type=int, default=0, help="base seed")
    train.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    train.add_argument("--env", default="gridworld-5x5", help=f"one of {', '.join(ENV_IDS)}")
    train.add_argument("--constraint", choices=CONSTRAINT_KINDS, default=None)
    train.add_argument("--iters", type=int, default=None, help="iterations per seed")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--no-grad-kl", dest="no_grad_kl", action="store_true")
    train.add_argument("--no-dynamic-stopping", dest="no_dynamic_stopping", action="store_true")
    train.add_argument("--no-per-state-acceptance", dest="no_per_state_acceptance",
                       action="store_true")
    train.set_defaults(func=cmd_train)

    solve = sub.add_parser("solve", help="solve an instance file, cross-check the oracle")
    solve.add_argument("instance", help="instance JSON (object or list of objects)")
    solve.add_argument("--constraint", choices=CONSTRAINT_KINDS, default=None)
    solve.add_argument("--delta", type=float, default=None)
    solve.add_argument("--epsilon", type=float, default=None)
    solve.add_argument("--verbose", action="store_true",
                       help="print every instance in batch mode")
    solve.set_defaults(func=cmd_solve)

    plot = sub.add_parser("plotdata", help="flatten a run directory into long-format CSV")
    plot.add_argument("run_dir")
    plot.add_argument("--out", default=None, help="write here instead of stdout")
    plot.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
