"""Experiment runner: configs, metric traces, sweeps, and CSV output.

A run is a grid of cells (algorithm, activation probability, accuracy
target); each cell executes a configurable number of seeded repeats,
emitting one trace file per repeat plus the across-repeat mean trace.
Trace files are deterministic byte for byte given the same configuration
and seed: wall-clock time is kept on the in-memory records but never
written to disk.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines, cfl_admm, problem, topology
from .cfl_admm import CflState, ConfigError, EpsilonSchedule, RunConfig
from .topology import EsGraph

TRACE_COLUMNS = (
    "iteration",
    "optimality_gap",
    "global_objective",
    "consensus_user_es",
    "consensus_es_es",
    "cumulative_messages",
)

ALGORITHMS = ("cfl-admm", "gt-saga", "d-sgd")

OUTPUT_DIR_ENV = "CFLSIM_OUTPUT"


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    optimality_gap: float
    global_objective: float
    consensus_user_es: float
    consensus_es_es: float
    cumulative_messages: float
    wall_time: float

    def row(self) -> tuple:
        return (
            self.iteration,
            self.optimality_gap,
            self.global_objective,
            self.consensus_user_es,
            self.consensus_es_es,
            self.cumulative_messages,
        )


def optimality_gap(x: np.ndarray, x_star: np.ndarray, graph: EsGraph) -> float:
    """Normalized mean squared distance of every user model to the optimum."""
    x_star = np.asarray(x_star, dtype=np.float64)
    norm_sq = float(x_star @ x_star)
    if norm_sq == 0.0:
        raise ConfigError(
            "optimality gap undefined for a zero reference solution; "
            "this cannot happen for a ridge-regularized fit on nondegenerate data"
        )
    diffs = x - x_star[None, :]
    total = float(np.sum(diffs * diffs))
    return total / (norm_sq * graph.num_users)


class MetricsEvaluator:
    """Per-iteration metrics against a fixed reference solution.

    When every user holds the same number of samples the summed objective
    is evaluated with one batched contraction instead of a per-user loop.
    """

    def __init__(self, objectives, graph: EsGraph, x_star: np.ndarray):
        self.objectives = objectives
        self.graph = graph
        self.x_star = np.asarray(x_star, dtype=np.float64)
        self._batch = None
        counts = {
            obj.features.shape[0] for obj in objectives if hasattr(obj, "features")
        }
        if len(counts) == 1 and all(hasattr(o, "features") for o in objectives):
            feats = np.stack([obj.features for obj in objectives])
            labels = np.stack([obj.labels for obj in objectives])
            ridge = objectives[0].ridge_weight
            if all(o.ridge_weight == ridge for o in objectives):
                self._batch = (feats, labels, ridge)

    def objective_at(self, x: np.ndarray) -> float:
        """Sum of all user losses, each at that user's own point."""
        if self._batch is not None:
            feats, labels, ridge = self._batch
            z = np.einsum("usn,un->us", feats, x)
            nll = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - labels * z
            return float(0.5 * ridge * np.sum(x * x) + np.sum(nll))
        return float(
            sum(obj.loss(x[g]) for g, obj in enumerate(self.objectives))
        )

    def record(
        self, iteration: int, x: np.ndarray, y: np.ndarray,
        messages: float, started: float,
    ) -> TraceRecord:
        user_es, es_es = cfl_admm.consensus_residuals(x, y, self.graph)
        return TraceRecord(
            iteration=iteration,
            optimality_gap=optimality_gap(x, self.x_star, self.graph),
            global_objective=self.objective_at(x),
            consensus_user_es=user_es,
            consensus_es_es=es_es,
            cumulative_messages=float(messages),
            wall_time=time.perf_counter() - started,
        )


# ------------------------------ runners -----------------------------------


def run_cfl_admm(
    objectives,
    graph: EsGraph,
    config: RunConfig,
    x_star: np.ndarray,
    on_iteration=None,
) -> list[TraceRecord]:
    """Run the ADMM solver for the configured number of iterations.

    ``on_iteration(state, record)`` is invoked once per iteration after the
    metrics are computed; it may inspect but must not mutate the state.
    """
    dim = x_star.shape[0]
    d = topology.build_d_matrix(
        graph, config.alpha, config.sigma1, config.sigma2, block_dim=dim
    )
    state = CflState.zeros(graph, dim)
    metrics = MetricsEvaluator(objectives, graph, x_star)
    started = time.perf_counter()
    out = []
    for _ in range(config.max_iterations):
        cfl_admm.step(state, objectives, graph, d, config)
        rec = metrics.record(
            state.iteration, state.x, state.y, state.messages_sent, started
        )
        out.append(rec)
        if on_iteration is not None:
            on_iteration(state, rec)
    return out


def _expand_servers(y: np.ndarray, graph: EsGraph) -> np.ndarray:
    return np.repeat(y, np.asarray(graph.users_per_server, dtype=np.int64), axis=0)


def run_gt_saga(
    objectives,
    graph: EsGraph,
    config: RunConfig,
    stepsize: float,
    x_star: np.ndarray,
) -> list[TraceRecord]:
    """GT-SAGA trace; the user-side model is the downloaded server variable."""
    dim = x_star.shape[0]
    weights = baselines.metropolis_weights(graph)
    state = baselines.gt_saga_init(objectives, graph, dim)
    metrics = MetricsEvaluator(objectives, graph, x_star)
    started = time.perf_counter()
    out = []
    for _ in range(config.max_iterations):
        rng = cfl_admm.selection_rng(config.seed, state.iteration + 1)
        baselines.gt_saga_step(
            state, objectives, graph, weights, stepsize, config.alpha, rng
        )
        x_view = _expand_servers(state.y, graph)
        out.append(
            metrics.record(state.iteration, x_view, state.y, state.messages_sent, started)
        )
    return out


def run_d_sgd(
    objectives,
    graph: EsGraph,
    config: RunConfig,
    stepsize: float,
    x_star: np.ndarray,
) -> list[TraceRecord]:
    dim = x_star.shape[0]
    weights = baselines.metropolis_weights(graph)
    state = baselines.d_sgd_init(graph, dim)
    metrics = MetricsEvaluator(objectives, graph, x_star)
    started = time.perf_counter()
    out = []
    for _ in range(config.max_iterations):
        rng = cfl_admm.selection_rng(config.seed, state.iteration + 1)
        baselines.d_sgd_step(
            state, objectives, graph, weights, stepsize, config.alpha, rng
        )
        x_view = _expand_servers(state.y, graph)
        out.append(
            metrics.record(state.iteration, x_view, state.y, state.messages_sent, started)
        )
    return out


# --------------------------- reference cache -------------------------------


def reference_key(objectives, tol: float) -> str:
    """Content hash of the aggregate problem: all shards plus the ridge."""
    h = hashlib.sha256()
    for obj in objectives:
        h.update(np.ascontiguousarray(obj.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(obj.labels, dtype="<f8").tobytes())
        h.update(np.float64(obj.ridge_weight).tobytes())
    h.update(np.float64(tol).tobytes())
    return h.hexdigest()[:24]


def compute_reference(objectives, tol: float, cache_dir) -> np.ndarray:
    """Solve for the centralized optimum, caching by content hash."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = reference_key(objectives, tol)
    vec_path = cache_dir / f"xstar_{key}.npy"
    meta_path = cache_dir / f"xstar_{key}.json"
    if vec_path.exists() and meta_path.exists():
        return np.load(vec_path)
    x_star = problem.solve_reference(objectives, tol=tol)
    gnorm = float(np.linalg.norm(problem.total_gradient(objectives, x_star)))
    np.save(vec_path, x_star)
    meta = {
        "hash": key,
        "tolerance": tol,
        "gradient_norm": gnorm,
        "dim": int(x_star.shape[0]),
        "num_users": len(objectives),
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    return x_star


# ------------------------------- config ------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat description of one experiment grid."""

    # topology
    topology: str = "ring"
    num_servers: int = 4
    users_per_server: tuple[int, ...] | int = 20
    edges: tuple[tuple[int, int], ...] | None = None
    edge_prob: float = 0.5
    topology_seed: int = 1
    # dataset
    dataset: str = "synthetic"
    csv_path: str | None = None
    csv_skip_header: bool = False
    synthetic_samples: int = 2000
    feature_dim: int = 10
    feature_scale: float = 0.3
    label_noise: float = 0.05
    feature_anisotropy: float = 1.0
    feature_offset: float = 0.0
    data_seed: int = 7
    per_user: int = 20
    kappa: float = 0.3
    # algorithm
    algorithm: str = "cfl-admm"
    alpha: float = 0.3
    epsilon: str = "decreasing"
    sigma1: float = 0.4
    sigma2: float = 1.0
    max_iterations: int = 500
    max_inner: int = 100_000
    seed: int = 1
    repeats: int = 20
    stepsize: float | None = None
    stepsize_grid: tuple[float, ...] = (3e-4, 1e-3, 2e-3, 3e-3, 5e-3, 1e-2)
    tuning_repeats: int = 3
    # sweeps
    alpha_sweep: tuple[float, ...] = ()
    epsilon_sweep: tuple[str, ...] = ()
    # output
    output_dir: str = "runs"
    reference_tol: float = 1e-10
    plots: bool = True

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.dataset not in ("synthetic", "csv"):
            raise ConfigError(f"dataset must be 'synthetic' or 'csv', got {self.dataset!r}")
        if self.dataset == "csv":
            if not self.csv_path:
                raise ConfigError("dataset = csv requires csv_path")
            if not Path(self.csv_path).exists():
                raise ConfigError(f"csv_path does not exist: {self.csv_path}")
        _parse_epsilon(self.epsilon)
        for e in self.epsilon_sweep:
            _parse_epsilon(e)
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.tuning_repeats < 1:
            raise ConfigError("tuning_repeats must be at least 1")
        if not self.stepsize_grid and self.stepsize is None:
            raise ConfigError("baselines need a stepsize or a stepsize_grid")

    def resolved_output_dir(self) -> Path:
        env = os.environ.get(OUTPUT_DIR_ENV)
        return Path(env) if env else Path(self.output_dir)

    def alphas(self) -> tuple[float, ...]:
        return self.alpha_sweep if self.alpha_sweep else (self.alpha,)

    def epsilons(self) -> tuple[str, ...]:
        if self.algorithm != "cfl-admm":
            return ("-",)
        return self.epsilon_sweep if self.epsilon_sweep else (self.epsilon,)

    def build_graph(self) -> EsGraph:
        if self.topology == "explicit":
            if not self.edges:
                raise ConfigError("explicit topology requires an edge list")
            return EsGraph(
                self.num_servers,
                tuple(self.edges),
                topology._user_counts(self.num_servers, self.users_per_server),
            )
        if self.topology == "erdos-renyi":
            return topology.erdos_renyi_graph(
                self.num_servers, self.users_per_server,
                edge_prob=self.edge_prob, seed=self.topology_seed,
            )
        return topology.make_graph(self.topology, self.num_servers, self.users_per_server)

    def load_samples(self) -> list[problem.Sample]:
        if self.dataset == "csv":
            return problem.load_credit_csv(self.csv_path, skip_header=self.csv_skip_header)
        return problem.synthetic_dataset(
            self.synthetic_samples, self.feature_dim, self.data_seed,
            feature_scale=self.feature_scale, label_noise=self.label_noise,
            feature_anisotropy=self.feature_anisotropy,
            feature_offset=self.feature_offset,
        )

    def build_problem(self):
        """Graph, per-user objectives, and the cached reference solution."""
        graph = self.build_graph()
        samples = self.load_samples()
        shards = problem.partition(samples, graph, self.per_user, self.data_seed)
        objectives = problem.build_objectives(shards, self.kappa)
        cache = self.resolved_output_dir() / "reference_cache"
        x_star = compute_reference(objectives, self.reference_tol, cache)
        return graph, objectives, x_star

    def run_config(self, alpha: float, epsilon: str, seed: int) -> RunConfig:
        return RunConfig(
            alpha=alpha,
            sigma1=self.sigma1,
            sigma2=self.sigma2,
            epsilon=_parse_epsilon(epsilon if epsilon != "-" else "decreasing"),
            max_iterations=self.max_iterations,
            max_inner=self.max_inner,
            seed=seed,
        )

    def header_lines(self, graph: EsGraph, extra: dict | None = None) -> list[str]:
        """Deterministic provenance header recorded at the top of each trace."""
        info = {
            "algorithm": self.algorithm,
            "topology": self.topology,
            "edges": ";".join(f"{u}-{v}" for (u, v) in graph.edges),
            "users_per_server": ",".join(str(s) for s in graph.users_per_server),
            "dataset": self.dataset,
            "dataset_detail": (
                self.csv_path
                if self.dataset == "csv"
                else f"samples={self.synthetic_samples},dim={self.feature_dim},"
                     f"scale={self.feature_scale:g},noise={self.label_noise:g},"
                     f"anisotropy={self.feature_anisotropy:g},"
                     f"offset={self.feature_offset:g},seed={self.data_seed}"
            ),
            "feature_preprocessing": (
                "per-column min-max to [0,1], constant columns to 0, bias appended"
                if self.dataset == "csv" else "generated in [0,1]-free scale, bias appended"
            ),
            "per_user": self.per_user,
            "kappa": f"{self.kappa:.17g}",
            "sigma1": f"{self.sigma1:.17g}",
            "sigma2": f"{self.sigma2:.17g}",
            "reference_tol": f"{self.reference_tol:.17g}",
        }
        if extra:
            info.update(extra)
        return [f"# {k} = {v}" for k, v in info.items()]


def _parse_epsilon(text: str | float) -> EpsilonSchedule:
    if isinstance(text, (int, float)):
        return EpsilonSchedule.fixed(float(text))
    t = text.strip().lower()
    if t in ("decreasing", "dec"):
        return EpsilonSchedule.decreasing()
    try:
        return EpsilonSchedule.fixed(float(t))
    except ValueError:
        raise ConfigError(f"epsilon must be a number or 'decreasing', got {text!r}") from None


_LIST_KEYS = {"alpha_sweep", "epsilon_sweep", "stepsize_grid", "users_per_server", "edges"}
_INT_KEYS = {
    "num_servers", "topology_seed", "synthetic_samples", "feature_dim", "data_seed",
    "per_user", "max_iterations", "max_inner", "seed", "repeats", "tuning_repeats",
}
_FLOAT_KEYS = {
    "edge_prob", "feature_scale", "label_noise", "feature_anisotropy",
    "feature_offset", "kappa", "alpha", "sigma1", "sigma2",
    "stepsize", "reference_tol",
}
_BOOL_KEYS = {"csv_skip_header", "plots"}


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat ``key = value`` format (lists comma-separated)."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        if not hasattr(ExperimentConfig, "__dataclass_fields__") or (
            key not in ExperimentConfig.__dataclass_fields__
        ):
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _convert(key, val)
    return ExperimentConfig(**values)


def _convert(key: str, val: str):
    if key in _BOOL_KEYS:
        if val.lower() in ("true", "yes", "1"):
            return True
        if val.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {val!r}")
    if key in _INT_KEYS:
        return int(val)
    if key in _FLOAT_KEYS:
        return float(val)
    if key in _LIST_KEYS:
        items = [p.strip() for p in val.split(",") if p.strip()]
        if key == "edges":
            out = []
            for item in items:
                u, _, v = item.partition("-")
                out.append((int(u), int(v)))
            return tuple(out)
        if key == "users_per_server":
            parsed = tuple(int(p) for p in items)
            return parsed[0] if len(parsed) == 1 else parsed
        if key == "epsilon_sweep":
            return tuple(items)
        return tuple(float(p) for p in items)
    return val


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ------------------------------ trace files --------------------------------


def format_float(v: float) -> str:
    return f"{v:.17g}"


def write_trace(path, records, header_lines) -> None:
    lines = list(header_lines)
    lines.append(",".join(TRACE_COLUMNS))
    for rec in records:
        row = rec.row() if isinstance(rec, TraceRecord) else rec
        lines.append(
            ",".join(
                str(int(row[0])) if i == 0 else format_float(float(row[i]))
                for i in range(len(TRACE_COLUMNS))
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trace(path):
    """Return (header dict, column dict of numpy arrays)."""
    header = {}
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            header[key.strip()] = val.strip()
        else:
            body_start = i
            break
    columns = lines[body_start].split(",")
    for line in lines[body_start + 1 :]:
        if line.strip():
            rows.append([float(p) for p in line.split(",")])
    data = np.asarray(rows, dtype=np.float64)
    return header, {c: data[:, j] for j, c in enumerate(columns)}


def mean_trace(per_repeat: list[list[TraceRecord]]) -> list[tuple]:
    """Arithmetic mean of every column across repeats, per iteration."""
    if not per_repeat:
        raise ConfigError("no traces to average")
    length = len(per_repeat[0])
    if any(len(t) != length for t in per_repeat):
        raise ConfigError("traces must have equal length to average")
    stacks = np.asarray(
        [[rec.row() for rec in trace] for trace in per_repeat], dtype=np.float64
    )
    means = stacks.mean(axis=0)
    return [tuple(row) for row in means]


# ----------------------------- experiment ----------------------------------


@dataclass
class CellResult:
    algorithm: str
    alpha: float
    epsilon: str
    status: str
    detail: str
    stepsize: float | None
    mean_path: str | None
    trace_paths: list[str] = field(default_factory=list)
    mean_records: list[tuple] | None = None


def _cell_tag(algorithm: str, alpha: float, epsilon: str) -> str:
    eps = "dec" if epsilon in ("decreasing", "dec") else epsilon.replace("-", "m")
    eps = eps if epsilon != "-" else "na"
    return f"{algorithm}_a{alpha:g}_e{eps}"


def _run_single(config, graph, objectives, x_star, alpha, epsilon, seed, stepsize):
    rc = config.run_config(alpha, epsilon, seed)
    if config.algorithm == "cfl-admm":
        return run_cfl_admm(objectives, graph, rc, x_star)
    if config.algorithm == "gt-saga":
        return run_gt_saga(objectives, graph, rc, stepsize, x_star)
    return run_d_sgd(objectives, graph, rc, stepsize, x_star)


def _tune_stepsize(config, graph, objectives, x_star, alpha) -> tuple[float, dict]:
    """Pick the grid stepsize with the best mean final gap on tuning seeds."""
    if config.stepsize is not None:
        return config.stepsize, {"stepsize_source": "configured"}
    best_gamma, best_score = None, np.inf
    n_tune = min(config.tuning_repeats, config.repeats)
    for gamma in config.stepsize_grid:
        finals = []
        for r in range(n_tune):
            trace = _run_single(
                config, graph, objectives, x_star, alpha, "-", config.seed + r, gamma
            )
            final = trace[-1].optimality_gap
            finals.append(final if np.isfinite(final) else np.inf)
        score = float(np.mean(finals))
        if score < best_score:
            best_score, best_gamma = score, gamma
    if best_gamma is None or not np.isfinite(best_score):
        raise ConfigError("stepsize grid search found no stable stepsize")
    note = {
        "stepsize_source": "grid-search",
        "stepsize_grid": ",".join(f"{g:g}" for g in config.stepsize_grid),
        "tuning_repeats": str(n_tune),
        "tuned_final_gap": f"{best_score:.6g}",
    }
    return best_gamma, note


def run_experiment(config: ExperimentConfig) -> list[CellResult]:
    """Run the whole grid, writing traces, mean traces, summary, figures.

    A failure inside one cell is recorded on its summary row; remaining
    cells still run.
    """
    config.validate()
    out_dir = config.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    graph, objectives, x_star = config.build_problem()
    results: list[CellResult] = []
    for alpha in config.alphas():
        for epsilon in config.epsilons():
            tag = _cell_tag(config.algorithm, alpha, epsilon)
            try:
                results.append(
                    _run_cell(config, graph, objectives, x_star, alpha, epsilon, out_dir, tag)
                )
            except Exception as exc:  # recorded per cell, sweep continues
                results.append(
                    CellResult(
                        algorithm=config.algorithm, alpha=alpha, epsilon=epsilon,
                        status="failed", detail=f"{type(exc).__name__}: {exc}",
                        stepsize=None, mean_path=None,
                    )
                )
    _write_summary(out_dir / "summary.csv", results)
    if config.plots:
        from . import plots

        ok = [r for r in results if r.status == "ok" and r.mean_records]
        if ok:
            series = {
                f"{r.algorithm} alpha={r.alpha:g} eps={r.epsilon}": r.mean_records
                for r in ok
            }
            plots.render_gap_figure(series, out_dir / "gap_comparison.png")
    return results


def _run_cell(config, graph, objectives, x_star, alpha, epsilon, out_dir, tag) -> CellResult:
    stepsize, tuning_note = None, {}
    if config.algorithm != "cfl-admm":
        stepsize, tuning_note = _tune_stepsize(config, graph, objectives, x_star, alpha)
    per_repeat = []
    trace_paths = []
    for r in range(config.repeats):
        seed = config.seed + r
        trace = _run_single(config, graph, objectives, x_star, alpha, epsilon, seed, stepsize)
        per_repeat.append(trace)
        extra = {
            "alpha": f"{alpha:.17g}", "epsilon": epsilon, "seed": str(seed),
            "repeats": str(config.repeats),
        }
        if stepsize is not None:
            extra["stepsize"] = f"{stepsize:.17g}"
        extra.update(tuning_note)
        path = out_dir / f"trace_{tag}_s{seed}.csv"
        write_trace(path, trace, config.header_lines(graph, extra))
        trace_paths.append(str(path))
    means = mean_trace(per_repeat)
    extra = {
        "alpha": f"{alpha:.17g}", "epsilon": epsilon,
        "seed": f"{config.seed}..{config.seed + config.repeats - 1}",
        "repeats": str(config.repeats), "aggregate": "mean",
    }
    if stepsize is not None:
        extra["stepsize"] = f"{stepsize:.17g}"
    extra.update(tuning_note)
    mean_path = out_dir / f"trace_{tag}_mean.csv"
    write_trace(mean_path, means, config.header_lines(graph, extra))
    if config.plots:
        from . import plots

        plots.render_cell_figure(per_repeat, means, out_dir / f"fig_{tag}.png", tag)
    return CellResult(
        algorithm=config.algorithm, alpha=alpha, epsilon=epsilon, status="ok",
        detail="", stepsize=stepsize, mean_path=str(mean_path),
        trace_paths=trace_paths, mean_records=means,
    )


def _write_summary(path, results: list[CellResult]) -> None:
    lines = ["algorithm,alpha,epsilon,status,stepsize,final_gap,mean_trace,detail"]
    for r in results:
        final = (
            format_float(r.mean_records[-1][1]) if r.mean_records else ""
        )
        step = format_float(r.stepsize) if r.stepsize is not None else ""
        detail = r.detail.replace(",", ";").replace("\n", " ")
        lines.append(
            f"{r.algorithm},{r.alpha:g},{r.epsilon},{r.status},{step},"
            f"{final},{r.mean_path or ''},{detail}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def iterations_to_threshold(gaps: np.ndarray, threshold: float) -> int | None:
    """First 1-based iteration whose gap is at or below the threshold."""
    idx = np.flatnonzero(np.asarray(gaps) <= threshold)
    return int(idx[0] + 1) if idx.size else None
