"""Confederated-learning simulator: consensus ADMM with random user
scheduling over decentralized edge-server networks, plus gradient-tracking
and decentralized-SGD baselines and an experiment harness."""

from .cfl_admm import (
    CflState,
    EpsilonSchedule,
    RunConfig,
    consensus_residuals,
    select_users,
    step,
    weighted_averages,
)
from .harness import ExperimentConfig, TraceRecord, optimality_gap, run_experiment
from .problem import (
    LogisticObjective,
    ProxResult,
    QuadraticObjective,
    Sample,
    load_credit_csv,
    partition,
    prox_solve,
    solve_reference,
    synthetic_dataset,
)
from .topology import (
    BlockMatrix,
    EsGraph,
    build_d_matrix,
    build_p_matrix,
    degree_matrix,
    incidence_matrix,
)

__all__ = [
    "BlockMatrix",
    "CflState",
    "EpsilonSchedule",
    "EsGraph",
    "ExperimentConfig",
    "LogisticObjective",
    "ProxResult",
    "QuadraticObjective",
    "RunConfig",
    "Sample",
    "TraceRecord",
    "build_d_matrix",
    "build_p_matrix",
    "consensus_residuals",
    "degree_matrix",
    "incidence_matrix",
    "load_credit_csv",
    "optimality_gap",
    "partition",
    "prox_solve",
    "run_experiment",
    "select_users",
    "solve_reference",
    "step",
    "synthetic_dataset",
    "weighted_averages",
]

__version__ = "0.1.0"
