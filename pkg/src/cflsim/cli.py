"""Command-line entry point.

Subcommands:

* ``run``        one experiment cell (seed required)
* ``sweep``      the full grid from the config's sweep lists
* ``reference``  compute and cache the centralized optimum
* ``check``      fast invariant suite on a tiny built-in instance
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import baselines, cfl_admm, harness, problem, topology
from .cfl_admm import CflState, ConfigError, RunConfig
from .problem import ProblemError
from .topology import TopologyError


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="config file (key = value)")
    p.add_argument("--algorithm", choices=harness.ALGORITHMS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epsilon", type=str, help="number or 'decreasing'")
    p.add_argument("--sigma1", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--iterations", type=int, dest="max_iterations")
    p.add_argument("--repeats", type=int)
    p.add_argument("--output", type=str, dest="output_dir")
    p.add_argument("--kappa", type=float)
    p.add_argument("--stepsize", type=float)
    p.add_argument("--no-plots", action="store_true")


_OVERRIDES = (
    "algorithm", "alpha", "epsilon", "sigma1", "sigma2", "max_iterations",
    "repeats", "output_dir", "kappa", "stepsize",
)


def _build_config(args) -> harness.ExperimentConfig:
    if args.config:
        cfg = harness.load_config(args.config)
    else:
        cfg = harness.ExperimentConfig()
    updates = {}
    for name in _OVERRIDES:
        val = getattr(args, name, None)
        if val is not None:
            updates[name] = val
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "no_plots", False):
        updates["plots"] = False
    return replace(cfg, **updates)


def cmd_run(args) -> int:
    cfg = _build_config(args)
    cfg = replace(cfg, alpha_sweep=(), epsilon_sweep=())
    cfg.validate()
    results = harness.run_experiment(cfg)
    return _report(results)


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    cfg.validate()
    if not cfg.alpha_sweep and not cfg.epsilon_sweep:
        print("sweep: config has no alpha_sweep or epsilon_sweep", file=sys.stderr)
        return 2
    results = harness.run_experiment(cfg)
    return _report(results)


def _report(results) -> int:
    failed = 0
    for r in results:
        line = f"[{r.status}] {r.algorithm} alpha={r.alpha:g} eps={r.epsilon}"
        if r.status == "ok":
            line += f" final_gap={r.mean_records[-1][1]:.3e} -> {r.mean_path}"
        else:
            line += f" ({r.detail})"
            failed += 1
        print(line)
    return 1 if failed else 0


def cmd_reference(args) -> int:
    cfg = _build_config(args)
    cfg.validate()
    graph, objectives, x_star = cfg.build_problem()
    key = harness.reference_key(objectives, cfg.reference_tol)
    cache = cfg.resolved_output_dir() / "reference_cache"
    print(f"reference solution cached: {cache / f'xstar_{key}.npy'}")
    print(f"dim={x_star.shape[0]} norm={np.linalg.norm(x_star):.12g}")
    return 0


def cmd_check(args) -> int:
    """Invariant suite on a tiny instance; exits nonzero on any failure."""
    failures = []

    def check(name: str, ok: bool, detail: str = ""):
        print(f"{'ok  ' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))
        if not ok:
            failures.append(name)

    graph = topology.ring_graph(4, 3)
    dim = 3
    samples = problem.synthetic_dataset(graph.num_users * 4, dim, seed=5)
    shards = problem.partition(samples, graph, 4, seed=5)
    objectives = problem.build_objectives(shards, ridge_weight=0.1)

    for alpha in (0.3, 1.0):
        d = topology.build_d_matrix(graph, alpha, 1.0, 1.0, block_dim=dim)
        p = topology.build_p_matrix(graph, d, alpha)
        check(
            f"matrix margins alpha={alpha:g}",
            topology.d_condition_margin(graph, d, alpha, 1.0, 1.0) >= topology.PSD_TOL
            and topology.p_condition_margin(graph, p, alpha, 1.0, 1.0) >= topology.PSD_TOL,
        )

    config = RunConfig(alpha=0.5, max_iterations=40, seed=11)
    d = topology.build_d_matrix(graph, config.alpha, 1.0, 1.0, block_dim=dim)
    state = CflState.zeros(graph, dim)
    worst_dual = worst_acc = worst_dense = 0.0
    for _ in range(40):
        lam_before = state.lam.copy()
        y_dense = baselines.dense_cfl_y_update(
            state.x, state.lam, state.y, state.beta, graph, d, config
        ) if state.iteration > 0 else None
        cfl_admm.step(state, objectives, graph, d, config)
        ident = state.lam - lam_before - config.alpha * config.sigma1 * (
            state.x - state.y[state.user_server]
        )
        worst_dual = max(worst_dual, float(np.abs(ident).max()))
        a_in = topology.incidence_matrix(graph).base
        worst_acc = max(
            worst_acc,
            float(np.abs(state.laplacian_accumulator - a_in.T @ state.beta).max()),
        )
    check("dual identity over 40 iterations", worst_dual <= 1e-12, f"{worst_dual:.2e}")
    check("accumulator equals central dual", worst_acc <= 1e-10, f"{worst_acc:.2e}")

    s1 = CflState.zeros(graph, dim)
    s2 = CflState.zeros(graph, dim)
    for _ in range(10):
        cfl_admm.step(s1, objectives, graph, d, config)
        cfl_admm.step(s2, objectives, graph, d, config)
    check(
        "determinism (same seed, bitwise)",
        np.array_equal(s1.x, s2.x) and np.array_equal(s1.lam, s2.lam)
        and np.array_equal(s1.y, s2.y) and s1.messages_sent == s2.messages_sent,
    )

    if failures:
        print(f"{len(failures)} check(s) failed")
        return 1
    print("all checks passed")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cflsim",
        description="Confederated-learning simulator: ADMM and gradient baselines "
                    "over decentralized edge-server networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment cell")
    _add_override_flags(p_run)
    p_run.add_argument("--seed", type=int, required=True)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the configured sweep grid")
    _add_override_flags(p_sweep)
    p_sweep.add_argument("--seed", type=int)
    p_sweep.set_defaults(func=cmd_sweep)

    p_ref = sub.add_parser("reference", help="compute and cache the optimum")
    _add_override_flags(p_ref)
    p_ref.set_defaults(func=cmd_reference)

    p_check = sub.add_parser("check", help="run the invariant suite")
    p_check.set_defaults(func=cmd_check)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ProblemError, TopologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
