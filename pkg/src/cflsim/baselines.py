"""Gradient-based comparison methods and the dense exact-ADMM oracle.

GT-SAGA and D-SGD run on the same server graph and user population as the
ADMM solver: per round, activated users download their server's variable,
upload one gradient evaluated there, and the servers mix with Metropolis
weights. Message accounting matches the ADMM solver so per-iteration
communication costs are comparable.

The dense ADMM implementation materializes every operator and solves each
user subproblem to near-machine accuracy; it exists as an independently
coded trajectory oracle for tests, not as a deployable path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cfl_admm import ConfigError, RunConfig, select_users
from .topology import BlockMatrix, EsGraph, incidence_matrix, laplacian_matrix


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly-stochastic weights supported on the server graph."""

    base: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=np.float64))

    def mix(self, values: np.ndarray) -> np.ndarray:
        return self.base @ values


def metropolis_weights(graph: EsGraph) -> MixingMatrix:
    """Metropolis-Hastings weights: ``1 / (1 + max(deg_i, deg_j))`` per edge."""
    l = graph.num_servers
    deg = graph.degrees()
    w = np.zeros((l, l))
    for (u, v) in graph.edges:
        w[u, v] = w[v, u] = 1.0 / (1.0 + max(deg[u], deg[v]))
    np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    return MixingMatrix(w)


class GradientTable:
    """Last-uploaded gradient of every user, with a running per-server mean."""

    def __init__(self, entries: np.ndarray, offsets: np.ndarray):
        self.entries = entries          # (num_users, n)
        self.offsets = offsets          # (num_servers + 1,)
        sizes = np.diff(offsets).astype(np.float64)
        self.mean = (
            np.add.reduceat(entries, offsets[:-1], axis=0) / sizes[:, None]
        )

    def server_sum(self, i: int) -> np.ndarray:
        size = float(self.offsets[i + 1] - self.offsets[i])
        return size * self.mean[i]

    def replace(self, i: int, local_idx: np.ndarray, new_grads: np.ndarray) -> None:
        """Swap in fresh gradients for some of server i's users."""
        if len(local_idx) == 0:
            return
        base = self.offsets[i]
        size = float(self.offsets[i + 1] - self.offsets[i])
        old = self.entries[base + local_idx]
        self.entries[base + local_idx] = new_grads
        self.mean[i] += np.sum(new_grads - old, axis=0) / size


@dataclass
class GtSagaState:
    iteration: int
    y: np.ndarray             # (num_servers, n) server models
    tracker: np.ndarray       # (num_servers, n) gradient trackers
    estimator: np.ndarray     # (num_servers, n) last variance-reduced estimate
    table: GradientTable
    messages_sent: int


def gt_saga_init(objectives, graph: EsGraph, dim: int) -> GtSagaState:
    """Zero models, full gradient table at zero, trackers at the aggregates."""
    y = np.zeros((graph.num_servers, dim))
    entries = np.stack([obj.gradient(np.zeros(dim)) for obj in objectives])
    table = GradientTable(entries, graph.user_offsets())
    est = np.stack([table.server_sum(i) for i in range(graph.num_servers)])
    return GtSagaState(
        iteration=0, y=y, tracker=est.copy(), estimator=est,
        table=table, messages_sent=0,
    )


def gt_saga_step(
    state: GtSagaState,
    objectives,
    graph: EsGraph,
    weights: MixingMatrix,
    stepsize: float,
    alpha: float,
    rng: np.random.Generator,
) -> None:
    """One round: fresh uploads replace stale table entries, track, step.

    Each activated user contributes exactly one gradient, evaluated at the
    variable it downloaded. The server's estimate swaps those fresh
    gradients into its stored sum; the tracker mixes and absorbs the
    estimate change; the model mixes and steps along the tracker.
    """
    selection = select_users(graph, alpha, rng)
    offsets = graph.user_offsets()
    new_est = np.empty_like(state.estimator)
    selected_total = 0
    for i, local in enumerate(selection):
        base = offsets[i]
        stored = state.table.server_sum(i)
        if len(local) > 0:
            fresh = np.stack(
                [objectives[int(base + j)].gradient(state.y[i]) for j in local]
            )
            old = state.table.entries[base + local]
            new_est[i] = stored + np.sum(fresh - old, axis=0)
            state.table.replace(i, local, fresh)
            selected_total += len(local)
        else:
            new_est[i] = stored
    state.tracker = weights.mix(state.tracker) + new_est - state.estimator
    state.y = weights.mix(state.y) - stepsize * state.tracker
    state.estimator = new_est
    state.messages_sent += 2 * graph.num_servers + selected_total
    state.iteration += 1


@dataclass
class DsgdState:
    iteration: int
    y: np.ndarray
    messages_sent: int


def d_sgd_init(graph: EsGraph, dim: int) -> DsgdState:
    return DsgdState(iteration=0, y=np.zeros((graph.num_servers, dim)), messages_sent=0)


def d_sgd_step(
    state: DsgdState,
    objectives,
    graph: EsGraph,
    weights: MixingMatrix,
    stepsize: float,
    alpha: float,
    rng: np.random.Generator,
) -> None:
    """Mix, then step along the inverse-probability-scaled sampled gradient.

    The ``1/alpha`` scaling makes the sampled sum an unbiased estimate of
    the server's full gradient; an empty selection contributes nothing
    that round.
    """
    selection = select_users(graph, alpha, rng)
    offsets = graph.user_offsets()
    grad = np.zeros_like(state.y)
    selected_total = 0
    for i, local in enumerate(selection):
        base = offsets[i]
        for j in local:
            grad[i] += objectives[int(base + j)].gradient(state.y[i])
        selected_total += len(local)
    if alpha > 0:
        grad /= alpha
    state.y = weights.mix(state.y) - stepsize * grad
    state.messages_sent += 2 * graph.num_servers + selected_total
    state.iteration += 1


# -------------------- dense exact ADMM (test oracle) ----------------------


@dataclass
class DenseAdmmState:
    iteration: int
    x: np.ndarray        # (num_users, n)
    lam: np.ndarray      # (num_users, n)
    y: np.ndarray        # (num_servers, n)
    beta: np.ndarray     # (num_edges, n)


@dataclass(frozen=True)
class DenseMatrices:
    """Materialized server-level operators for the oracle's direct solves."""

    incidence: np.ndarray       # (|E|, l)
    laplacian: np.ndarray       # (l, l)
    sizes: np.ndarray           # (l,) user counts
    d_diag: np.ndarray | None   # (l,) diagonal weight, proximal variant only

    @classmethod
    def build(cls, graph: EsGraph, d: BlockMatrix | None = None) -> "DenseMatrices":
        return cls(
            incidence=incidence_matrix(graph).base,
            laplacian=laplacian_matrix(graph).base,
            sizes=np.asarray(graph.users_per_server, dtype=np.float64),
            d_diag=None if d is None else d.diagonal(),
        )


def dense_admm_init(graph: EsGraph, dim: int) -> DenseAdmmState:
    return DenseAdmmState(
        iteration=0,
        x=np.zeros((graph.num_users, dim)),
        lam=np.zeros((graph.num_users, dim)),
        y=np.zeros((graph.num_servers, dim)),
        beta=np.zeros((graph.num_edges, dim)),
    )


def _exact_prox(obj, anchor: np.ndarray, dual: np.ndarray, sigma1: float,
                tol: float = 1e-10) -> np.ndarray:
    """Solve the user subproblem by Newton's method to residual ``tol``.

    Quadratic objectives finish in one solve via their closed form; smooth
    convex ones take a handful of damped Newton steps. Independent of the
    first-order path the production solver uses.
    """
    if hasattr(obj, "prox_exact"):
        return obj.prox_exact(anchor, dual, sigma1)
    x = np.array(anchor, dtype=np.float64)
    eye = np.eye(x.shape[0])
    for _ in range(100):
        grad = obj.gradient(x) + dual + sigma1 * (x - anchor)
        if float(np.linalg.norm(grad)) <= tol:
            return x
        hess = obj.hessian(x) + sigma1 * eye
        x = x - np.linalg.solve(hess, grad)
    raise ConfigError("oracle prox failed to converge; objective too hard for Newton")


def dense_cfl_y_update(
    x: np.ndarray,
    lam: np.ndarray,
    y: np.ndarray,
    beta: np.ndarray,
    graph: EsGraph,
    d: BlockMatrix,
    config: RunConfig,
) -> np.ndarray:
    """Centralized closed-form server update, straight from the global duals.

    Uses the materialized incidence matrix and the full per-user dual
    stack, none of which a real server can see. Reference for checking the
    decentralized accumulator-based update.
    """
    a_in = incidence_matrix(graph).base
    lap = a_in.T @ a_in
    sizes = np.asarray(graph.users_per_server, dtype=np.float64)
    offsets = graph.user_offsets()
    sum_x = np.add.reduceat(x, offsets[:-1], axis=0)
    sum_lam = np.add.reduceat(lam, offsets[:-1], axis=0)
    a_s1 = config.alpha * config.sigma1
    lhs = a_s1 * np.diag(sizes) + config.sigma2 * np.diag(d.diagonal())
    rhs = (
        a_s1 * sum_x
        + sum_lam
        - a_in.T @ beta
        + config.sigma2 * ((np.diag(d.diagonal()) - lap) @ y)
    )
    return np.linalg.solve(lhs, rhs)


def centralized_admm_step(
    state: DenseAdmmState,
    objectives,
    matrices: DenseMatrices,
    config: RunConfig,
    use_proximal_term: bool = False,
) -> None:
    """Full-participation ADMM round with direct dense solves.

    With ``use_proximal_term`` the server update gains the diagonal-weight
    proximal term; at ``alpha = 1`` that variant walks the exact same
    trajectory as the decentralized solver, which is what the equivalence
    tests check.
    """
    l, n = state.y.shape
    offsets = np.concatenate([[0], np.cumsum(matrices.sizes)]).astype(np.int64)
    for g, obj in enumerate(objectives):
        i = int(np.searchsorted(offsets, g, side="right") - 1)
        state.x[g] = _exact_prox(obj, state.y[i], state.lam[g], config.sigma1)
    sum_x = np.add.reduceat(state.x, offsets[:-1], axis=0)
    sum_lam = np.add.reduceat(state.lam, offsets[:-1], axis=0)
    a_t_beta = matrices.incidence.T @ state.beta
    lhs = config.sigma1 * np.diag(matrices.sizes) + config.sigma2 * matrices.laplacian
    rhs = config.sigma1 * sum_x + sum_lam - a_t_beta
    if use_proximal_term:
        if matrices.d_diag is None:
            raise ConfigError("proximal variant needs the diagonal weight matrix")
        # weight (sigma2/alpha) P with P = alpha (D - L) collapses to sigma2 (D - L)
        prox_base = config.sigma2 * (np.diag(matrices.d_diag) - matrices.laplacian)
        lhs = lhs + prox_base
        rhs = rhs + prox_base @ state.y
    state.y = np.linalg.solve(lhs, rhs)
    y_rep = np.repeat(state.y, matrices.sizes.astype(np.int64), axis=0)
    state.lam = state.lam + config.sigma1 * (state.x - y_rep)
    state.beta = state.beta + config.sigma2 * (matrices.incidence @ state.y)
    state.iteration += 1
