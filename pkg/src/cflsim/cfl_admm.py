"""Consensus-ADMM over a decentralized server network with random user scheduling.

One iteration is a barrier round:

1. every user is independently activated with probability ``alpha``;
2. activated users inexactly solve their proximal subproblem (warm-started
   from their previous model) and upload the result, the rest keep their
   previous model;
3. each server combines its users' models, its two running aggregates and a
   single exchange of neighbor server variables into a closed-form update
   of its own variable;
4. per-edge duals advance by the weighted disagreement of the new server
   variables, mirrored into per-server accumulators that only ever see
   neighbor values;
5. every user (activated or not) advances its dual with the damped two-step
   rule.

Servers never see a user dual directly: the aggregate a server needs is
reconstructed from its own observation history, which is what makes the
server update decentralized. Per-edge duals are still tracked so tests can
falsify the accumulator bookkeeping against them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .problem import NonConvergenceError, batchable, batched_prox_solve, prox_solve
from .topology import BlockMatrix, EsGraph


class ConfigError(ValueError):
    """Raised for invalid run parameters."""


@dataclass(frozen=True)
class EpsilonSchedule:
    """Accuracy target for the per-user subproblem at each iteration.

    Either a constant, or the decreasing sequence ``1 / (100 + k^2)`` whose
    squares are summable, so the accumulated inexactness stays finite.
    """

    constant: float | None = None

    @classmethod
    def fixed(cls, value: float) -> "EpsilonSchedule":
        if value < 0:
            raise ConfigError("epsilon must be nonnegative")
        return cls(constant=float(value))

    @classmethod
    def decreasing(cls) -> "EpsilonSchedule":
        return cls(constant=None)

    def value(self, iteration: int) -> float:
        if self.constant is not None:
            return self.constant
        return 1.0 / (100.0 + float(iteration) ** 2)

    def describe(self) -> str:
        return "decreasing" if self.constant is None else f"{self.constant:.17g}"


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one solver run."""

    alpha: float
    sigma1: float = 1.0
    sigma2: float = 1.0
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule.decreasing)
    max_iterations: int = 500
    max_inner: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ConfigError("sigma1 and sigma2 must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")
        if self.max_inner < 1:
            raise ConfigError("max_inner must be at least 1")


def selection_rng(seed: int, iteration: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, iteration).

    Every draw is a pure function of the key and the draw position, so
    selections are reproducible no matter how rounds are executed.
    """
    return np.random.Generator(
        np.random.Philox(key=[np.uint64(seed), np.uint64(iteration)])
    )


def select_users(graph: EsGraph, alpha: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Independent Bernoulli(alpha) activation, returned per server.

    Entry ``i`` holds the local indices (within server i's user block) of
    the activated users; sets may be empty.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    draws = rng.random(graph.num_users)
    picked = draws < alpha
    offsets = graph.user_offsets()
    out = []
    for i in range(graph.num_servers):
        block = picked[offsets[i] : offsets[i + 1]]
        out.append(np.flatnonzero(block))
    return out


@dataclass
class CflState:
    """Full algorithm state after ``iteration`` completed rounds.

    ``dual_aggregate[i]`` carries the sum of server i's user duals and
    ``laplacian_accumulator[i]`` the i-th block of the incidence-transposed
    edge dual, both maintained incrementally from local observations. All
    vectors start at zero.
    """

    iteration: int
    x: np.ndarray               # (num_users, n) per-user models
    lam: np.ndarray             # (num_users, n) per-user duals
    y: np.ndarray               # (num_servers, n) server variables
    beta: np.ndarray            # (num_edges, n) per-edge duals (oracle track)
    dual_aggregate: np.ndarray          # (num_servers, n)
    laplacian_accumulator: np.ndarray   # (num_servers, n)
    messages_sent: int
    user_server: np.ndarray     # (num_users,) owning server of each user
    user_offsets: np.ndarray    # (num_servers + 1,) block boundaries

    @classmethod
    def zeros(cls, graph: EsGraph, dim: int) -> "CflState":
        n_users = graph.num_users
        l = graph.num_servers
        return cls(
            iteration=0,
            x=np.zeros((n_users, dim)),
            lam=np.zeros((n_users, dim)),
            y=np.zeros((l, dim)),
            beta=np.zeros((graph.num_edges, dim)),
            dual_aggregate=np.zeros((l, dim)),
            laplacian_accumulator=np.zeros((l, dim)),
            messages_sent=0,
            user_server=graph.user_server_index(),
            user_offsets=graph.user_offsets(),
        )

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def server_sum_x(self) -> np.ndarray:
        """Per-server sum of its users' models, shape (num_servers, n)."""
        return np.add.reduceat(self.x, self.user_offsets[:-1], axis=0)

    def copy(self) -> "CflState":
        return CflState(
            iteration=self.iteration,
            x=self.x.copy(),
            lam=self.lam.copy(),
            y=self.y.copy(),
            beta=self.beta.copy(),
            dual_aggregate=self.dual_aggregate.copy(),
            laplacian_accumulator=self.laplacian_accumulator.copy(),
            messages_sent=self.messages_sent,
            user_server=self.user_server.copy(),
            user_offsets=self.user_offsets.copy(),
        )

    # --- checkpointing: length-prefixed binary, bit-exact round trip ---

    _MAGIC = b"CFLSTAT1"

    def save(self, path) -> None:
        arrays = [
            self.x, self.lam, self.y, self.beta,
            self.dual_aggregate, self.laplacian_accumulator,
        ]
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<qq", self.iteration, self.messages_sent))
            fh.write(struct.pack("<q", len(arrays)))
            for arr in arrays:
                fh.write(struct.pack("<qq", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            idx = self.user_server.astype("<i8")
            off = self.user_offsets.astype("<i8")
            fh.write(struct.pack("<q", idx.shape[0]))
            fh.write(idx.tobytes())
            fh.write(struct.pack("<q", off.shape[0]))
            fh.write(off.tobytes())

    @classmethod
    def load(cls, path) -> "CflState":
        with open(path, "rb") as fh:
            magic = fh.read(len(cls._MAGIC))
            if magic != cls._MAGIC:
                raise ConfigError(f"not a state checkpoint: {path}")
            iteration, messages = struct.unpack("<qq", fh.read(16))
            (count,) = struct.unpack("<q", fh.read(8))
            arrays = []
            for _ in range(count):
                rows, cols = struct.unpack("<qq", fh.read(16))
                buf = fh.read(rows * cols * 8)
                arrays.append(np.frombuffer(buf, dtype="<f8").reshape(rows, cols).copy())
            (m,) = struct.unpack("<q", fh.read(8))
            user_server = np.frombuffer(fh.read(m * 8), dtype="<i8").copy()
            (m,) = struct.unpack("<q", fh.read(8))
            user_offsets = np.frombuffer(fh.read(m * 8), dtype="<i8").copy()
        x, lam, y, beta, dual_agg, lap_acc = arrays
        return cls(
            iteration=iteration, x=x, lam=lam, y=y, beta=beta,
            dual_aggregate=dual_agg, laplacian_accumulator=lap_acc,
            messages_sent=messages, user_server=user_server,
            user_offsets=user_offsets,
        )


@dataclass
class StepStats:
    epsilon: float
    selected: int
    inner_iterations: int


def x_update(
    state: CflState,
    objectives,
    selection: list[np.ndarray],
    epsilon_k: float,
    config: RunConfig,
) -> StepStats:
    """Inexact proximal update for the activated users; the rest keep x.

    Homogeneous logistic shards run through one vectorized descent loop,
    other objectives through the scalar solver; both apply the same update
    and the same stopping rule. Unselected rows of ``state.x`` are
    untouched, so they stay bitwise identical within the round.
    """
    indices = []
    anchor_rows = []
    for i, local in enumerate(selection):
        base = state.user_offsets[i]
        for j in local:
            indices.append(int(base + j))
            anchor_rows.append(i)
    if not indices:
        return StepStats(epsilon=epsilon_k, selected=0, inner_iterations=0)
    if len(indices) > 1 and batchable(objectives, indices):
        points, _, inner = batched_prox_solve(
            objectives, indices, state.x[indices], state.y[anchor_rows],
            state.lam[indices], config.sigma1, epsilon_k, config.max_inner,
        )
        state.x[indices] = points
        return StepStats(
            epsilon=epsilon_k, selected=len(indices),
            inner_iterations=int(inner.sum()),
        )
    total_inner = 0
    for g, i in zip(indices, anchor_rows):
        try:
            res = prox_solve(
                objectives[g], state.x[g], state.y[i], state.lam[g],
                config.sigma1, epsilon_k, config.max_inner,
            )
        except NonConvergenceError as exc:
            local_j = g - int(state.user_offsets[i])
            raise NonConvergenceError(
                f"user ({i},{local_j}): {exc}", exc.best_residual, exc.iterations
            ) from exc
        state.x[g] = res.point
        total_inner += res.inner_iterations
    return StepStats(
        epsilon=epsilon_k, selected=len(indices), inner_iterations=total_inner
    )


@dataclass(frozen=True)
class EsView:
    """Everything one server may see when updating its variable.

    Own users' summed models, its two running aggregates, its own variable,
    and the variables its one-hop neighbors sent this round. Nothing else.
    """

    sum_x: np.ndarray
    num_users: int
    degree: int
    d_entry: float
    dual_aggregate: np.ndarray
    laplacian_accumulator: np.ndarray
    y_own: np.ndarray
    neighbor_ys: tuple[np.ndarray, ...]


def local_y_update(view: EsView, config: RunConfig) -> np.ndarray:
    """Closed-form server update from purely local information."""
    a_s1 = config.alpha * config.sigma1
    lap_own = view.degree * view.y_own - (
        np.sum(view.neighbor_ys, axis=0) if view.neighbor_ys else np.zeros_like(view.y_own)
    )
    numer = (
        a_s1 * view.sum_x
        + view.dual_aggregate
        - view.laplacian_accumulator
        + config.sigma2 * (view.d_entry * view.y_own - lap_own)
    )
    return numer / (a_s1 * view.num_users + config.sigma2 * view.d_entry)


def make_es_views(state: CflState, graph: EsGraph, d: BlockMatrix) -> list[EsView]:
    sums = state.server_sum_x()
    diag = d.diagonal()
    deg = graph.degrees()
    views = []
    for i in range(graph.num_servers):
        views.append(
            EsView(
                sum_x=sums[i],
                num_users=int(graph.users_per_server[i]),
                degree=int(deg[i]),
                d_entry=float(diag[i]),
                dual_aggregate=state.dual_aggregate[i],
                laplacian_accumulator=state.laplacian_accumulator[i],
                y_own=state.y[i],
                neighbor_ys=tuple(state.y[j] for j in graph.neighbors(i)),
            )
        )
    return views


def y_update(state: CflState, graph: EsGraph, d: BlockMatrix, config: RunConfig) -> None:
    """One barrier round of server updates.

    All servers read the same pre-round neighbor variables (one gossip
    exchange), then switch to the new values together.
    """
    views = make_es_views(state, graph, d)
    new_y = np.stack([local_y_update(v, config) for v in views])
    state.y = new_y


def beta_update(state: CflState, graph: EsGraph, config: RunConfig) -> None:
    """Advance per-edge duals and mirror them into local accumulators.

    Each edge dual moves by ``sigma2 * (y_tail - y_head)``; each server adds
    ``sigma2`` times the Laplacian row applied to the new variables, which
    only involves its own and its neighbors' values.
    """
    lap_rows = np.empty_like(state.laplacian_accumulator)
    deg = graph.degrees()
    for i in range(graph.num_servers):
        nbs = graph.neighbors(i)
        acc = deg[i] * state.y[i]
        for j in nbs:
            acc = acc - state.y[j]
        lap_rows[i] = acc
    state.laplacian_accumulator += config.sigma2 * lap_rows
    for e, (u, v) in enumerate(graph.edges):
        state.beta[e] += config.sigma2 * (state.y[u] - state.y[v])


def lambda_update(state: CflState, config: RunConfig) -> None:
    """Two-step dual update at every user: full step, then damp by alpha.

    The damping keeps the dual trajectory commensurate with the fraction of
    users that actually refreshed their primal variables this round.
    """
    y_rep = state.y[state.user_server]
    lam_bar = state.lam + config.sigma1 * (state.x - y_rep)
    state.lam = state.lam + config.alpha * (lam_bar - state.lam)
    # Servers advance their dual aggregate from what they already observe:
    # the summed user models and their own variable.
    sums = state.server_sum_x()
    sizes = np.diff(state.user_offsets).astype(np.float64)
    state.dual_aggregate += (
        config.alpha * config.sigma1 * (sums - sizes[:, None] * state.y)
    )


def expected_message_count(graph: EsGraph, alpha: float) -> float:
    """Mean messages per iteration: l downlinks, l gossips, alpha*N uplinks."""
    return 2.0 * graph.num_servers + alpha * graph.num_users


def step(
    state: CflState,
    objectives,
    graph: EsGraph,
    d: BlockMatrix,
    config: RunConfig,
    rng: np.random.Generator | None = None,
) -> StepStats:
    """One full iteration: select, solve, combine, advance duals, account.

    ``rng`` defaults to the counter-based stream keyed by the config seed
    and the iteration number; pass one explicitly to force a selection.
    """
    k_next = state.iteration + 1
    if rng is None:
        rng = selection_rng(config.seed, k_next)
    eps_k = config.epsilon.value(k_next)
    selection = select_users(graph, config.alpha, rng)
    stats = x_update(state, objectives, selection, eps_k, config)
    y_update(state, graph, d, config)
    beta_update(state, graph, config)
    lambda_update(state, config)
    state.messages_sent += 2 * graph.num_servers + stats.selected
    state.iteration = k_next
    return stats


def weighted_averages(
    x_history, y_history, alpha: float
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted running averages with terminal weight ``1/(1+alpha(T-1))``.

    All iterates before the last carry ``alpha`` times the terminal weight;
    the weights sum to one. With ``alpha = 1`` this is the uniform average.
    """
    t = len(x_history)
    if t < 1 or len(y_history) != t:
        raise ConfigError("histories must be nonempty and equally long")
    w_last = 1.0 / (1.0 + alpha * (t - 1))
    x_avg = w_last * np.asarray(x_history[-1], dtype=np.float64).copy()
    y_avg = w_last * np.asarray(y_history[-1], dtype=np.float64).copy()
    for s in range(t - 1):
        x_avg += alpha * w_last * x_history[s]
        y_avg += alpha * w_last * y_history[s]
    return x_avg, y_avg


def consensus_residuals(
    x: np.ndarray, y: np.ndarray, graph: EsGraph
) -> tuple[float, float]:
    """Feasibility residuals: user/server disagreement and server/server.

    Returns the sum over servers of the norm of the stacked differences
    between a server's users and its variable, and the incidence-applied
    norm of the server variables.
    """
    offsets = graph.user_offsets()
    user_es = 0.0
    for i in range(graph.num_servers):
        block = x[offsets[i] : offsets[i + 1]] - y[i]
        user_es += float(np.linalg.norm(block.ravel()))
    es_es = 0.0
    for (u, v) in graph.edges:
        diff = y[u] - y[v]
        es_es += float(diff @ diff)
    return user_es, float(np.sqrt(es_es))
