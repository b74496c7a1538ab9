"""Per-user objectives, the inexact proximal solver, and data handling.

Each user holds a small shard of samples and minimizes a ridge-regularized
logistic loss over the shared model vector. A plain quadratic objective with
the same interface is provided for tests, since its proximal step has a
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ProblemError(ValueError):
    """Raised for malformed data or dimension mismatches."""


class NonConvergenceError(RuntimeError):
    """An iterative solve ran out of its iteration budget.

    Carries the best residual reached so the caller can tell a mis-set
    smoothness bound from a genuinely too-small budget.
    """

    def __init__(self, message: str, best_residual: float, iterations: int):
        super().__init__(f"{message} (best residual {best_residual:.3e} "
                         f"after {iterations} iterations)")
        self.best_residual = best_residual
        self.iterations = iterations


@dataclass(frozen=True)
class Sample:
    """One labelled sample; the last feature coordinate is the 1.0 bias."""

    features: np.ndarray
    label: int

    def __post_init__(self):
        object.__setattr__(
            self, "features", np.asarray(self.features, dtype=np.float64)
        )
        if self.features.ndim != 1:
            raise ProblemError("features must be a 1-d vector")
        if self.label not in (0, 1):
            raise ProblemError(f"label must be 0 or 1, got {self.label}")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z) = max(z, 0) + log(1 + e^-|z|), overflow-free
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


class LogisticObjective:
    """Ridge-regularized logistic loss over one user's samples.

    loss(x) = (kappa/2) ||x||^2 + sum_s [ softplus(w_s.x) - y_s (w_s.x) ]

    The ridge weight is also the strong-convexity modulus; the gradient
    Lipschitz bound is ``kappa + sum ||w_s||^2 / 4`` from the 1/4 cap on the
    sigmoid derivative.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, ridge_weight: float):
        if ridge_weight <= 0:
            raise ProblemError("ridge weight must be positive for strong convexity")
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ProblemError("features must be a (samples, dim) matrix")
        self.features = features
        self.labels = np.asarray(labels, dtype=np.float64).ravel()
        if self.features.shape[0] != self.labels.shape[0]:
            raise ProblemError("features and labels disagree on sample count")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ProblemError("labels must be binary")
        self.ridge_weight = float(ridge_weight)
        self.mu = self.ridge_weight
        self.lipschitz = self.ridge_weight + 0.25 * float(
            np.sum(self.features * self.features)
        )

    @classmethod
    def from_samples(cls, samples: list[Sample], ridge_weight: float) -> "LogisticObjective":
        if not samples:
            raise ProblemError("objective needs at least one sample")
        feats = np.stack([s.features for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.float64)
        return cls(feats, labels, ridge_weight)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def _check_dim(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ProblemError(f"expected point of dimension {self.dim}, got {x.shape}")
        return x

    def loss(self, x: np.ndarray) -> float:
        x = self._check_dim(x)
        z = self.features @ x
        nll = float(np.sum(_softplus(z) - self.labels * z))
        return 0.5 * self.ridge_weight * float(x @ x) + nll

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = self._check_dim(x)
        z = self.features @ x
        return self.ridge_weight * x + self.features.T @ (_stable_sigmoid(z) - self.labels)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        x = self._check_dim(x)
        s = _stable_sigmoid(self.features @ x)
        w = s * (1.0 - s)
        return self.ridge_weight * np.eye(self.dim) + (self.features.T * w) @ self.features


class QuadraticObjective:
    """``0.5 (x - c)^T Q (x - c)`` with symmetric positive definite Q.

    Every update involving it has a closed form, which makes it the test
    objective of choice.
    """

    def __init__(self, quad: np.ndarray, center: np.ndarray):
        center = np.asarray(center, dtype=np.float64)
        quad = np.asarray(quad, dtype=np.float64)
        if quad.ndim == 0:
            quad = float(quad) * np.eye(center.shape[0])
        if quad.shape != (center.shape[0], center.shape[0]):
            raise ProblemError("quadratic matrix does not match center dimension")
        if not np.allclose(quad, quad.T):
            raise ProblemError("quadratic matrix must be symmetric")
        eigs = np.linalg.eigvalsh(quad)
        if eigs[0] <= 0:
            raise ProblemError("quadratic matrix must be positive definite")
        self.quad = quad
        self.center = center
        self.mu = float(eigs[0])
        self.lipschitz = float(eigs[-1])

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def _check_dim(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ProblemError(f"expected point of dimension {self.dim}, got {x.shape}")
        return x

    def loss(self, x: np.ndarray) -> float:
        d = self._check_dim(x) - self.center
        return 0.5 * float(d @ self.quad @ d)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.quad @ (self._check_dim(x) - self.center)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        self._check_dim(x)
        return self.quad

    def prox_exact(self, anchor: np.ndarray, dual: np.ndarray, sigma1: float) -> np.ndarray:
        """Exact minimizer of ``loss(x) + (sigma1/2)||x - anchor + dual/sigma1||^2``."""
        n = self.dim
        rhs = self.quad @ self.center + sigma1 * anchor - dual
        return np.linalg.solve(self.quad + sigma1 * np.eye(n), rhs)


@dataclass(frozen=True)
class ProxResult:
    point: np.ndarray
    residual_norm: float
    inner_iterations: int


def prox_residual(
    obj, x: np.ndarray, anchor: np.ndarray, dual: np.ndarray, sigma1: float
) -> np.ndarray:
    """Stationarity residual of the per-user subproblem at ``x``."""
    return obj.gradient(x) + dual + sigma1 * (x - anchor)


def prox_solve(
    obj,
    warm_start: np.ndarray,
    anchor: np.ndarray,
    dual: np.ndarray,
    sigma1: float,
    epsilon: float,
    max_inner: int = 100_000,
) -> ProxResult:
    """Inexactly minimize ``obj(x) + (sigma1/2)||x - anchor + dual/sigma1||^2``.

    Fixed-step gradient descent (step ``1/(L + sigma1)``) from ``warm_start``
    until the stationarity residual norm is at most ``epsilon``. An epsilon
    of zero asks for a machine-scale solve: the target becomes
    ``1e-12 * (1 + initial residual norm)``.

    Raises :class:`NonConvergenceError` if ``max_inner`` steps are not
    enough, carrying the best residual seen.
    """
    if epsilon < 0:
        raise ProblemError("epsilon must be nonnegative")
    x = np.array(warm_start, dtype=np.float64)
    step = 1.0 / (obj.lipschitz + sigma1)
    residual = prox_residual(obj, x, anchor, dual, sigma1)
    rnorm = float(np.linalg.norm(residual))
    target = epsilon if epsilon > 0 else 1e-12 * (1.0 + rnorm)
    if rnorm <= target:
        return ProxResult(np.array(warm_start, dtype=np.float64), rnorm, 0)
    best = rnorm
    for it in range(1, max_inner + 1):
        x = x - step * residual
        residual = prox_residual(obj, x, anchor, dual, sigma1)
        rnorm = float(np.linalg.norm(residual))
        if rnorm <= target:
            return ProxResult(x, rnorm, it)
        best = min(best, rnorm)
    raise NonConvergenceError(
        f"proximal solve did not reach residual {target:.3e}", best, max_inner
    )


def batchable(objectives, indices) -> bool:
    """True when the indexed users share shard shape and ridge weight.

    Homogeneous logistic shards let one vectorized descent loop drive all
    the selected subproblems at once.
    """
    picked = [objectives[g] for g in indices]
    if not picked or not all(isinstance(o, LogisticObjective) for o in picked):
        return False
    m = picked[0].features.shape[0]
    ridge = picked[0].ridge_weight
    return all(
        o.features.shape[0] == m and o.ridge_weight == ridge for o in picked
    )


def batched_prox_solve(
    objectives,
    indices,
    warm_starts: np.ndarray,
    anchors: np.ndarray,
    duals: np.ndarray,
    sigma1: float,
    epsilon: float,
    max_inner: int = 100_000,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`prox_solve` over homogeneous logistic subproblems.

    Runs the identical fixed-step descent with the identical stopping rule
    for every indexed user simultaneously, freezing each one the moment its
    own residual target is met. Returns (points, residual norms, inner
    iteration counts) aligned with ``indices``.
    """
    if epsilon < 0:
        raise ProblemError("epsilon must be nonnegative")
    feats = np.stack([objectives[g].features for g in indices])      # (s, m, n)
    labels = np.stack([objectives[g].labels for g in indices])       # (s, m)
    ridge = objectives[indices[0]].ridge_weight
    steps = np.array(
        [1.0 / (objectives[g].lipschitz + sigma1) for g in indices]
    )
    x = np.array(warm_starts, dtype=np.float64)
    s = x.shape[0]

    def residuals(pts, f, lab, anc, du):
        z = np.einsum("smn,sn->sm", f, pts)
        sig = _stable_sigmoid(z)
        grad = ridge * pts + np.einsum("smn,sm->sn", f, sig - lab)
        tau = grad + du + sigma1 * (pts - anc)
        return tau, np.linalg.norm(tau, axis=1)

    tau, rnorm = residuals(x, feats, labels, anchors, duals)
    targets = np.full(s, epsilon) if epsilon > 0 else 1e-12 * (1.0 + rnorm)
    final_r = rnorm.copy()
    inner = np.zeros(s, dtype=np.int64)
    active = np.flatnonzero(rnorm > targets)
    it = 0
    while active.size:
        if it >= max_inner:
            raise NonConvergenceError(
                "batched proximal solve exhausted its budget",
                float(final_r[active].min()),
                max_inner,
            )
        it += 1
        x[active] -= steps[active, None] * tau[active]
        tau_a, rn_a = residuals(
            x[active], feats[active], labels[active],
            anchors[active], duals[active],
        )
        tau[active] = tau_a
        final_r[active] = rn_a
        inner[active] = it
        active = active[rn_a > targets[active]]
    return x, final_r, inner


# ----------------------------- data ---------------------------------------


def load_credit_csv(path, skip_header: bool = False) -> list[Sample]:
    """Load a delimited file of 24-column rows into samples.

    The first 23 columns are min-max scaled to [0, 1] per column over the
    whole file (constant columns map to 0), a 1.0 bias is appended, and the
    last column is the binary label.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = 1 if skip_header else 0
    for idx, line in enumerate(lines[start:], start=start):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 24:
            raise ProblemError(f"row {idx}: expected 24 entries, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ProblemError(f"row {idx}: non-numeric entry ({exc})") from None
        if vals[-1] not in (0.0, 1.0):
            raise ProblemError(f"row {idx}: label must be 0 or 1, got {vals[-1]}")
        rows.append(vals)
    if not rows:
        raise ProblemError(f"no data rows in {path}")
    data = np.asarray(rows, dtype=np.float64)
    feats, labels = data[:, :23], data[:, 23]
    lo, hi = feats.min(axis=0), feats.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (feats - lo) / np.where(span > 0, span, 1.0), 0.0)
    bias = np.ones((scaled.shape[0], 1))
    full = np.hstack([scaled, bias])
    return [Sample(full[i], int(labels[i])) for i in range(full.shape[0])]


def synthetic_dataset(
    num_samples: int,
    dim: int,
    seed: int,
    feature_scale: float = 0.3,
    label_noise: float = 0.05,
    feature_anisotropy: float = 1.0,
    feature_offset: float = 0.0,
) -> list[Sample]:
    """Gaussian features with a planted linear separator and label flips.

    The last coordinate is the 1.0 bias, matching the loader convention.
    Per-coordinate standard deviations decay log-linearly from
    ``feature_scale`` down to ``feature_scale / feature_anisotropy``, and
    coordinate means are drawn from ``[0, feature_offset]``; the defaults
    give centered isotropic features. Deterministic given the seed.
    """
    if dim < 2:
        raise ProblemError("need at least 2 dimensions (one feature plus bias)")
    if feature_anisotropy < 1.0:
        raise ProblemError("feature_anisotropy must be at least 1")
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0xDA7A)]))
    offsets = rng.uniform(0.0, feature_offset, dim - 1) if feature_offset > 0 else 0.0
    scales = feature_scale * np.logspace(0.0, -np.log10(feature_anisotropy), dim - 1)
    feats = np.empty((num_samples, dim))
    feats[:, :-1] = offsets + scales * rng.standard_normal((num_samples, dim - 1))
    feats[:, -1] = 1.0
    separator = rng.standard_normal(dim)
    labels = (feats @ separator > 0.0).astype(np.int64)
    flips = rng.random(num_samples) < label_noise
    labels[flips] = 1 - labels[flips]
    return [Sample(feats[i], int(labels[i])) for i in range(num_samples)]


def partition(samples: list[Sample], graph, per_user: int, seed: int) -> list[list[Sample]]:
    """Deal a seeded shuffle of the samples into disjoint per-user shards.

    Users are ordered server by server; the first ``per_user`` shuffled
    samples go to the first user, the next ``per_user`` to the second, and
    so on. Deterministic given the seed.
    """
    total_users = graph.num_users
    if per_user < 1:
        raise ProblemError("per_user must be at least 1: every user must hold data")
    needed = per_user * total_users
    if needed > len(samples):
        raise ProblemError(
            f"need {needed} samples for {total_users} users x {per_user}, "
            f"have {len(samples)}"
        )
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0x5A)]))
    order = rng.permutation(len(samples))
    shards = []
    for u in range(total_users):
        idx = order[u * per_user : (u + 1) * per_user]
        shards.append([samples[i] for i in idx])
    return shards


def build_objectives(shards: list[list[Sample]], ridge_weight: float) -> list[LogisticObjective]:
    return [LogisticObjective.from_samples(s, ridge_weight) for s in shards]


# ------------------------- reference solution -----------------------------


def total_gradient(objectives, x: np.ndarray) -> np.ndarray:
    g = np.zeros_like(x)
    for obj in objectives:
        g += obj.gradient(x)
    return g


def total_loss(objectives, x: np.ndarray) -> float:
    return float(sum(obj.loss(x) for obj in objectives))


def solve_reference(objectives, tol: float = 1e-10, max_iterations: int = 2_000_000) -> np.ndarray:
    """High-accuracy minimizer of the summed objective.

    Accelerated full-batch gradient descent with the strongly-convex
    momentum constant, run until the global gradient norm is at most
    ``tol``. The distance to the exact minimizer is then at most
    ``tol / (total strong convexity)``.
    """
    if tol <= 0:
        raise ProblemError("tol must be positive")
    mu = float(sum(obj.mu for obj in objectives))
    lip = float(sum(obj.lipschitz for obj in objectives))
    if mu <= 0:
        raise ProblemError("aggregate objective must be strongly convex")
    dim = objectives[0].dim
    x = np.zeros(dim)
    v = x.copy()
    step = 1.0 / lip
    kappa = lip / mu
    momentum = (np.sqrt(kappa) - 1.0) / (np.sqrt(kappa) + 1.0)
    best = np.inf
    for _ in range(max_iterations):
        g = total_gradient(objectives, v)
        gnorm = float(np.linalg.norm(total_gradient(objectives, x)))
        if gnorm <= tol:
            return x
        best = min(best, gnorm)
        x_new = v - step * g
        v = x_new + momentum * (x_new - x)
        x = x_new
    raise NonConvergenceError("reference solve did not converge", best, max_iterations)
