"""Edge-server communication graphs and the matrices derived from them.

The server network is an undirected connected graph. Every matrix used by
the solvers (incidence, Laplacian, degree, the diagonal D and the proximal
weight P) acts blockwise per model coordinate: the full operator is the
small ``l x l`` (or ``|E| x l``) base Kronecker-multiplied with an identity
of the model dimension. Only the base is ever stored or applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Slack allowed on the smallest eigenvalue of analytically-PSD matrices.
PSD_TOL = -1e-10


class TopologyError(ValueError):
    """Raised for invalid graphs or matrix-builder parameters."""


@dataclass(frozen=True)
class EsGraph:
    """Undirected edge-server graph with per-server user counts.

    Edges are stored with a canonical orientation: the lower-indexed server
    is the tail (+1 in the incidence matrix), the higher-indexed one the
    head (-1). Orientation does not change any Laplacian-derived quantity
    but makes per-edge dual variables reproducible.

    Servers are indexed ``0 .. num_servers - 1``.
    """

    num_servers: int
    edges: tuple[tuple[int, int], ...]
    users_per_server: tuple[int, ...]

    def __post_init__(self):
        l = self.num_servers
        if l < 1:
            raise TopologyError("need at least one server")
        canon = []
        seen = set()
        for (u, v) in self.edges:
            if u == v:
                raise TopologyError(f"self-loop at server {u}")
            if not (0 <= u < l and 0 <= v < l):
                raise TopologyError(f"edge ({u},{v}) out of range")
            e = (min(u, v), max(u, v))
            if e in seen:
                raise TopologyError(f"duplicate edge {e}")
            seen.add(e)
            canon.append(e)
        object.__setattr__(self, "edges", tuple(canon))
        if len(self.users_per_server) != l:
            raise TopologyError("users_per_server length must equal num_servers")
        if any(s < 1 for s in self.users_per_server):
            raise TopologyError("every server must have at least one user")
        if not _is_connected(l, self.edges):
            raise TopologyError("graph must be connected")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_users(self) -> int:
        return int(sum(self.users_per_server))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_servers, dtype=np.int64)
        for (u, v) in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def neighbors(self, i: int) -> list[int]:
        out = []
        for (u, v) in self.edges:
            if u == i:
                out.append(v)
            elif v == i:
                out.append(u)
        return sorted(out)

    def user_offsets(self) -> np.ndarray:
        """Start index of each server's user block in the flat user ordering."""
        return np.concatenate([[0], np.cumsum(self.users_per_server)]).astype(np.int64)

    def user_server_index(self) -> np.ndarray:
        """Server index of each user, flat ordering u_00, u_01, ..., u_10, ..."""
        return np.repeat(np.arange(self.num_servers), self.users_per_server)


def _is_connected(l: int, edges) -> bool:
    if l == 1:
        return True
    adj = [[] for _ in range(l)]
    for (u, v) in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * l
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        node = stack.pop()
        for nb in adj[node]:
            if not seen[nb]:
                seen[nb] = True
                count += 1
                stack.append(nb)
    return count == l


@dataclass(frozen=True)
class BlockMatrix:
    """A matrix of the form ``base (kron) I_n``, stored as the base only.

    ``apply`` multiplies the base against row-stacked block vectors, which
    is exactly the Kronecker product acting on the concatenated vector.
    """

    base: np.ndarray
    block_dim: int

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=np.float64))
        if self.base.ndim != 2:
            raise TopologyError("base must be a 2-d matrix")
        if self.block_dim < 1:
            raise TopologyError("block_dim must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.base.shape

    def apply(self, blocks: np.ndarray) -> np.ndarray:
        """Apply to ``(cols, n)`` row-stacked blocks, returning ``(rows, n)``."""
        blocks = np.asarray(blocks, dtype=np.float64)
        if blocks.shape != (self.base.shape[1], self.block_dim):
            raise TopologyError(
                f"expected blocks of shape {(self.base.shape[1], self.block_dim)}, "
                f"got {blocks.shape}"
            )
        return self.base @ blocks

    def dense(self) -> np.ndarray:
        """Materialize ``base (kron) I_n``. Test-scale sizes only."""
        return np.kron(self.base, np.eye(self.block_dim))

    def diagonal(self) -> np.ndarray:
        return np.diag(self.base).copy()


def incidence_matrix(graph: EsGraph, block_dim: int = 1) -> BlockMatrix:
    """Oriented incidence base: one row per edge, +1 at the tail, -1 at the head."""
    a = np.zeros((graph.num_edges, graph.num_servers))
    for r, (u, v) in enumerate(graph.edges):
        a[r, u] = 1.0
        a[r, v] = -1.0
    return BlockMatrix(a, block_dim)


def laplacian_matrix(graph: EsGraph, block_dim: int = 1) -> BlockMatrix:
    a = incidence_matrix(graph).base
    return BlockMatrix(a.T @ a, block_dim)


def degree_matrix(graph: EsGraph, block_dim: int = 1) -> BlockMatrix:
    return BlockMatrix(np.diag(graph.degrees().astype(np.float64)), block_dim)


def build_d_matrix(
    graph: EsGraph,
    alpha: float,
    sigma1: float,
    sigma2: float,
    block_dim: int = 1,
) -> BlockMatrix:
    """Diagonal weight matrix for the decentralized server update.

    Entry i is ``(1/alpha)(1/alpha^2 - 1)(sigma1/sigma2) |S_i| + 1.5 deg(i)``,
    which dominates both the per-server user mass and the graph curvature by
    a margin wide enough to keep the proximal weight positive semidefinite
    (see :func:`d_condition_margin`).
    """
    if not (0.0 < alpha <= 1.0):
        raise TopologyError(f"alpha must lie in (0, 1], got {alpha}")
    if sigma1 <= 0 or sigma2 <= 0:
        raise TopologyError("sigma1 and sigma2 must be positive")
    sizes = np.asarray(graph.users_per_server, dtype=np.float64)
    deg = graph.degrees().astype(np.float64)
    diag = (1.0 / alpha) * (1.0 / alpha**2 - 1.0) * (sigma1 / sigma2) * sizes + 1.5 * deg
    return BlockMatrix(np.diag(diag), block_dim)


def build_p_matrix(graph: EsGraph, d: BlockMatrix, alpha: float) -> BlockMatrix:
    """Proximal weight ``P = alpha (D - A^T A)`` on the server base."""
    if not (0.0 < alpha <= 1.0):
        raise TopologyError(f"alpha must lie in (0, 1], got {alpha}")
    lap = laplacian_matrix(graph).base
    if d.base.shape != lap.shape:
        raise TopologyError(
            f"D base shape {d.base.shape} does not match graph with "
            f"{graph.num_servers} servers"
        )
    return BlockMatrix(alpha * (d.base - lap), d.block_dim)


def smallest_eigenvalue(sym: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (sym + sym.T))[0])


def d_condition_margin(
    graph: EsGraph, d: BlockMatrix, alpha: float, sigma1: float, sigma2: float
) -> float:
    """Smallest eigenvalue of ``D - c HH^T - (3/4) A^T A`` on the base.

    ``c = (1/alpha)(1/alpha^2 - 1)(sigma1/sigma2)`` and ``HH^T`` is the
    diagonal of user counts. Nonnegative (up to :data:`PSD_TOL`) means D is
    an admissible diagonal weight.
    """
    sizes = np.asarray(graph.users_per_server, dtype=np.float64)
    c = (1.0 / alpha) * (1.0 / alpha**2 - 1.0) * (sigma1 / sigma2)
    m = d.base - c * np.diag(sizes) - 0.75 * laplacian_matrix(graph).base
    return smallest_eigenvalue(m)


def p_condition_margin(
    graph: EsGraph, p: BlockMatrix, alpha: float, sigma1: float, sigma2: float
) -> float:
    """Smallest eigenvalue of ``P - (1/alpha^2 - 1)(s1/s2) HH^T + (alpha/4) A^T A``.

    Nonnegative (up to :data:`PSD_TOL`) is the proximal-weight condition the
    convergence guarantee requires.
    """
    sizes = np.asarray(graph.users_per_server, dtype=np.float64)
    c = (1.0 / alpha**2 - 1.0) * (sigma1 / sigma2)
    rhs = c * np.diag(sizes) - 0.25 * alpha * laplacian_matrix(graph).base
    return smallest_eigenvalue(p.base - rhs)


# --------------------------- generators ----------------------------------


def ring_graph(l: int, users_per_server) -> EsGraph:
    if l < 3:
        raise TopologyError("ring needs at least 3 servers")
    edges = [(i, (i + 1) % l) for i in range(l)]
    return EsGraph(l, tuple(edges), _user_counts(l, users_per_server))


def path_graph(l: int, users_per_server) -> EsGraph:
    if l < 2:
        raise TopologyError("path needs at least 2 servers")
    edges = [(i, i + 1) for i in range(l - 1)]
    return EsGraph(l, tuple(edges), _user_counts(l, users_per_server))


def star_graph(l: int, users_per_server) -> EsGraph:
    """Server 0 is the hub."""
    if l < 2:
        raise TopologyError("star needs at least 2 servers")
    edges = [(0, i) for i in range(1, l)]
    return EsGraph(l, tuple(edges), _user_counts(l, users_per_server))


def erdos_renyi_graph(
    l: int, users_per_server, edge_prob: float, seed: int, max_tries: int = 1000
) -> EsGraph:
    """Random graph, resampled until connected. Deterministic given seed."""
    if l < 2:
        raise TopologyError("need at least 2 servers")
    counts = _user_counts(l, users_per_server)
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0xE5)]))
    for _ in range(max_tries):
        edges = tuple(
            (i, j) for i in range(l) for j in range(i + 1, l) if rng.random() < edge_prob
        )
        if _is_connected(l, edges):
            return EsGraph(l, edges, counts)
    raise TopologyError(
        f"no connected graph found in {max_tries} tries (edge_prob={edge_prob})"
    )


def _user_counts(l: int, users_per_server) -> tuple[int, ...]:
    if np.isscalar(users_per_server):
        return (int(users_per_server),) * l
    return tuple(int(s) for s in users_per_server)


_GENERATORS = {
    "ring": ring_graph,
    "path": path_graph,
    "star": star_graph,
}


def make_graph(kind: str, l: int, users_per_server, **kwargs) -> EsGraph:
    """Build a named topology; ``erdos-renyi`` takes ``edge_prob`` and ``seed``."""
    if kind == "erdos-renyi":
        return erdos_renyi_graph(l, users_per_server, **kwargs)
    try:
        return _GENERATORS[kind](l, users_per_server)
    except KeyError:
        raise TopologyError(f"unknown topology {kind!r}") from None
