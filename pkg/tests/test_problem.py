import math

import numpy as np
import pytest

from cflsim import problem as pb
from cflsim import topology as tp


def naive_loss(features, labels, ridge, x):
    """Straightforward per-sample evaluation, no stabilization tricks."""
    total = 0.5 * ridge * float(np.dot(x, x))
    for w, y in zip(features, labels):
        p = 1.0 / (1.0 + math.exp(-float(w @ x)))
        total += -y * math.log(p) - (1.0 - y) * math.log(1.0 - p)
    return total


def random_objective(rng, n=4, m=6, ridge=0.05):
    feats = rng.standard_normal((m, n))
    labels = rng.integers(0, 2, m).astype(float)
    return pb.LogisticObjective(feats, labels, ridge)


class TestLogisticObjective:
    def test_loss_at_zero_single_sample(self):
        obj = pb.LogisticObjective(np.array([[0.4, -1.2, 1.0]]), np.array([1.0]), 0.01)
        assert obj.loss(np.zeros(3)) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_ridge_zero_contribution_at_origin(self):
        obj = pb.LogisticObjective(np.array([[0.5, 1.0]]), np.array([0.0]), 0.01)
        # same value regardless of the ridge weight at x = 0
        other = pb.LogisticObjective(np.array([[0.5, 1.0]]), np.array([0.0]), 5.0)
        assert obj.loss(np.zeros(2)) == other.loss(np.zeros(2))

    def test_loss_matches_naive_summation(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            obj = random_objective(rng, n=3, m=2)
            x = rng.standard_normal(3)
            assert obj.loss(x) == pytest.approx(
                naive_loss(obj.features, obj.labels, obj.ridge_weight, x), abs=1e-12
            )

    def test_gradient_zero_point_single_positive_sample(self):
        w = np.array([0.7, -0.3, 1.0])
        obj = pb.LogisticObjective(w[None, :], np.array([1.0]), 1e-9)
        assert np.allclose(obj.gradient(np.zeros(3)), -w / 2.0, atol=1e-12)

    def test_gradient_zero_samples_is_ridge(self):
        obj = pb.LogisticObjective(np.zeros((0, 4)), np.zeros(0), 0.7)
        x = np.array([1.0, -2.0, 0.5, 3.0])
        assert np.allclose(obj.gradient(x), 0.7 * x)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        step = 1e-6
        for _ in range(100):
            obj = random_objective(rng)
            x = rng.standard_normal(4)
            grad = obj.gradient(x)
            fd = np.zeros(4)
            for i in range(4):
                e = np.zeros(4)
                e[i] = step
                fd[i] = (obj.loss(x + e) - obj.loss(x - e)) / (2.0 * step)
            assert np.linalg.norm(grad - fd) <= 1e-6 * max(1.0, np.linalg.norm(grad))

    def test_strong_convexity_inequality(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            obj = random_objective(rng, ridge=0.2)
            x, y = rng.standard_normal(4), rng.standard_normal(4)
            lhs = obj.loss(x) - obj.loss(y) - float(obj.gradient(y) @ (x - y))
            assert lhs >= 0.5 * obj.mu * float((x - y) @ (x - y)) - 1e-10

    def test_lipschitz_bound_dominates_hessian(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            obj = random_objective(rng)
            x = rng.standard_normal(4)
            top = float(np.linalg.eigvalsh(obj.hessian(x))[-1])
            assert top <= obj.lipschitz + 1e-12

    def test_numerical_stability_extreme_inputs(self):
        obj = pb.LogisticObjective(np.array([[100.0, 1.0]]), np.array([0.0]), 0.01)
        x = np.array([50.0, 0.0])
        assert np.isfinite(obj.loss(x))
        assert np.isfinite(obj.loss(-x))
        assert np.isfinite(obj.gradient(x)).all()

    def test_dimension_mismatch(self):
        obj = pb.LogisticObjective(np.ones((1, 3)), np.array([1.0]), 0.1)
        with pytest.raises(pb.ProblemError, match="dimension"):
            obj.loss(np.zeros(4))
        with pytest.raises(pb.ProblemError, match="dimension"):
            obj.gradient(np.zeros(2))

    def test_rejects_nonbinary_labels(self):
        with pytest.raises(pb.ProblemError, match="binary"):
            pb.LogisticObjective(np.ones((1, 2)), np.array([0.5]), 0.1)

    def test_rejects_nonpositive_ridge(self):
        with pytest.raises(pb.ProblemError, match="positive"):
            pb.LogisticObjective(np.ones((1, 2)), np.array([1.0]), 0.0)


class TestQuadraticObjective:
    def test_closed_form_prox(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((3, 3))
        quad = a @ a.T + 0.5 * np.eye(3)
        obj = pb.QuadraticObjective(quad, rng.standard_normal(3))
        anchor, dual = rng.standard_normal(3), rng.standard_normal(3)
        x = obj.prox_exact(anchor, dual, sigma1=2.0)
        res = pb.prox_residual(obj, x, anchor, dual, 2.0)
        assert np.linalg.norm(res) <= 1e-10


class TestProxSolve:
    def test_quadratic_shifted_anchor(self):
        # minimizer of (mu/2)||x||^2 + (s1/2)||x - y + lam/s1||^2 is
        # s1 (y - lam/s1) / (mu + s1)
        obj = pb.QuadraticObjective(1.0, np.zeros(3))
        anchor = np.array([2.0, 0.0, 0.0])
        res = pb.prox_solve(obj, np.zeros(3), anchor, np.zeros(3), 1.0, epsilon=0.0)
        assert np.allclose(res.point, [1.0, 0.0, 0.0], atol=1e-9)

    def test_large_epsilon_returns_warm_start(self):
        rng = np.random.default_rng(23)
        obj = random_objective(rng)
        warm = rng.standard_normal(4)
        r0 = np.linalg.norm(pb.prox_residual(obj, warm, np.zeros(4), np.zeros(4), 1.0))
        res = pb.prox_solve(obj, warm, np.zeros(4), np.zeros(4), 1.0, epsilon=2.0 * r0)
        assert res.inner_iterations == 0
        assert np.array_equal(res.point, warm)

    def test_logistic_tight_tolerance(self):
        rng = np.random.default_rng(29)
        obj = random_objective(rng, ridge=0.3)
        warm = rng.standard_normal(4)
        anchor, dual = rng.standard_normal(4), rng.standard_normal(4)
        r0 = np.linalg.norm(pb.prox_residual(obj, warm, anchor, dual, 1.0))
        res = pb.prox_solve(obj, warm, anchor, dual, 1.0, epsilon=1e-8)
        assert res.residual_norm <= 1e-8
        assert res.residual_norm <= r0

    def test_residual_reproducible_at_returned_point(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            obj = random_objective(rng)
            anchor, dual = rng.standard_normal(4), rng.standard_normal(4)
            res = pb.prox_solve(obj, rng.standard_normal(4), anchor, dual, 1.0, 1e-6)
            again = np.linalg.norm(pb.prox_residual(obj, res.point, anchor, dual, 1.0))
            assert abs(again - res.residual_norm) <= 1e-12

    def test_epsilon_zero_reaches_machine_scale_minimizer(self):
        rng = np.random.default_rng(37)
        quad = np.diag([0.5, 2.0, 1.0])
        obj = pb.QuadraticObjective(quad, rng.standard_normal(3))
        anchor, dual = rng.standard_normal(3), rng.standard_normal(3)
        res = pb.prox_solve(obj, np.zeros(3), anchor, dual, 1.5, epsilon=0.0)
        exact = obj.prox_exact(anchor, dual, 1.5)
        assert np.linalg.norm(res.point - exact) <= 1e-9

    def test_budget_exhaustion_raises_with_best_residual(self):
        rng = np.random.default_rng(41)
        obj = random_objective(rng)
        with pytest.raises(pb.NonConvergenceError) as err:
            pb.prox_solve(obj, rng.standard_normal(4) * 10, np.zeros(4), np.zeros(4),
                          1.0, epsilon=1e-14, max_inner=3)
        assert err.value.best_residual > 0
        assert err.value.iterations == 3

    def test_negative_epsilon_rejected(self):
        obj = pb.QuadraticObjective(1.0, np.zeros(2))
        with pytest.raises(pb.ProblemError):
            pb.prox_solve(obj, np.zeros(2), np.zeros(2), np.zeros(2), 1.0, -1e-3)


class TestBatchedProxSolve:
    def test_matches_scalar_solver(self):
        rng = np.random.default_rng(43)
        objs = [random_objective(rng, n=5, m=7, ridge=0.2) for _ in range(6)]
        warm = rng.standard_normal((6, 5))
        anchors = rng.standard_normal((6, 5))
        duals = rng.standard_normal((6, 5))
        pts, rnorms, inner = pb.batched_prox_solve(
            objs, list(range(6)), warm, anchors, duals, 1.0, 1e-7
        )
        for i in range(6):
            res = pb.prox_solve(objs[i], warm[i], anchors[i], duals[i], 1.0, 1e-7)
            assert res.inner_iterations == inner[i]
            assert np.allclose(res.point, pts[i], atol=1e-13, rtol=0.0)
            assert rnorms[i] <= 1e-7

    def test_epsilon_zero_matches_scalar(self):
        rng = np.random.default_rng(47)
        objs = [random_objective(rng, n=3, m=4, ridge=0.5) for _ in range(3)]
        warm = rng.standard_normal((3, 3))
        anchors = np.zeros((3, 3))
        duals = np.zeros((3, 3))
        pts, _, _ = pb.batched_prox_solve(objs, [0, 1, 2], warm, anchors, duals, 1.0, 0.0)
        for i in range(3):
            res = pb.prox_solve(objs[i], warm[i], anchors[i], duals[i], 1.0, 0.0)
            assert np.allclose(res.point, pts[i], atol=1e-12, rtol=0.0)

    def test_budget_exhaustion(self):
        rng = np.random.default_rng(53)
        objs = [random_objective(rng) for _ in range(2)]
        with pytest.raises(pb.NonConvergenceError):
            pb.batched_prox_solve(
                objs, [0, 1], rng.standard_normal((2, 4)) * 10,
                np.zeros((2, 4)), np.zeros((2, 4)), 1.0, 1e-14, max_inner=2,
            )

    def test_batchable_detection(self):
        rng = np.random.default_rng(59)
        homo = [random_objective(rng, m=6) for _ in range(3)]
        assert pb.batchable(homo, [0, 1, 2])
        hetero = homo + [random_objective(rng, m=9)]
        assert not pb.batchable(hetero, [0, 3])
        quad = homo + [pb.QuadraticObjective(1.0, np.zeros(4))]
        assert not pb.batchable(quad, [0, 3])


class TestCsvLoader:
    def _write(self, path, rows):
        path.write_text("\n".join(",".join(str(v) for v in row) for row in rows))

    def test_hand_scaled_fixture(self, tmp_path):
        rows = [
            [0.0] + [1.0] * 22 + [0],
            [5.0] + [1.0] * 22 + [1],
            [10.0] + [1.0] * 22 + [0],
        ]
        f = tmp_path / "d.csv"
        self._write(f, rows)
        samples = pb.load_credit_csv(f)
        assert len(samples) == 3
        assert samples[0].features.shape == (24,)
        # column 0 spans [0, 10] -> scaled 0, 0.5, 1; constant columns -> 0
        assert [s.features[0] for s in samples] == [0.0, 0.5, 1.0]
        assert all(s.features[1] == 0.0 for s in samples)
        assert all(s.features[-1] == 1.0 for s in samples)
        assert [s.label for s in samples] == [0, 1, 0]

    def test_full_scale_file(self, tmp_path):
        rng = np.random.default_rng(61)
        data = rng.uniform(0, 100, size=(30000, 23))
        labels = rng.integers(0, 2, size=(30000, 1))
        f = tmp_path / "big.csv"
        np.savetxt(f, np.hstack([data, labels]), delimiter=",", fmt="%.6f")
        samples = pb.load_credit_csv(f)
        assert len(samples) == 30000
        assert all(s.features.shape == (24,) for s in samples[:100])

    def test_malformed_row_reports_index(self, tmp_path):
        rows = [[1.0] * 23 + [0], [2.0] * 20 + [1]]
        f = tmp_path / "bad.csv"
        self._write(f, rows)
        with pytest.raises(pb.ProblemError, match="row 1"):
            pb.load_credit_csv(f)

    def test_nonbinary_label_rejected(self, tmp_path):
        rows = [[1.0] * 23 + [2]]
        f = tmp_path / "bad.csv"
        self._write(f, rows)
        with pytest.raises(pb.ProblemError, match="label"):
            pb.load_credit_csv(f)

    def test_non_numeric_rejected(self, tmp_path):
        f = tmp_path / "bad.csv"
        f.write_text(",".join(["a"] + ["1"] * 23))
        with pytest.raises(pb.ProblemError, match="row 0"):
            pb.load_credit_csv(f)

    def test_header_skip(self, tmp_path):
        f = tmp_path / "h.csv"
        header = ",".join(f"c{i}" for i in range(24))
        body = ",".join(["1.0"] * 23 + ["1"])
        f.write_text(header + "\n" + body)
        samples = pb.load_credit_csv(f, skip_header=True)
        assert len(samples) == 1
        with pytest.raises(pb.ProblemError):
            pb.load_credit_csv(f, skip_header=False)


class TestSyntheticDataset:
    def test_shapes_and_bias(self):
        samples = pb.synthetic_dataset(50, 6, seed=3)
        assert len(samples) == 50
        assert all(s.features.shape == (6,) for s in samples)
        assert all(s.features[-1] == 1.0 for s in samples)
        assert all(s.label in (0, 1) for s in samples)

    def test_deterministic(self):
        a = pb.synthetic_dataset(20, 4, seed=9)
        b = pb.synthetic_dataset(20, 4, seed=9)
        assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
        assert [x.label for x in a] == [y.label for y in b]

    def test_anisotropy_scales_features(self):
        samples = pb.synthetic_dataset(4000, 4, seed=1, feature_anisotropy=100.0)
        feats = np.stack([s.features for s in samples])
        stds = feats[:, :-1].std(axis=0)
        assert stds[0] / stds[-1] > 30.0


class TestPartition:
    def test_counts_and_disjointness(self):
        g = tp.ring_graph(4, 5)
        samples = pb.synthetic_dataset(1000, 4, seed=1)
        shards = pb.partition(samples, g, per_user=20, seed=2)
        assert len(shards) == 20
        assert all(len(s) == 20 for s in shards)
        seen = set()
        for shard in shards:
            for s in shard:
                key = s.features.tobytes()
                assert key not in seen
                seen.add(key)

    def test_deterministic(self):
        g = tp.path_graph(3, 2)
        samples = pb.synthetic_dataset(100, 4, seed=1)
        a = pb.partition(samples, g, 5, seed=77)
        b = pb.partition(samples, g, 5, seed=77)
        for sa, sb in zip(a, b):
            assert all(np.array_equal(x.features, y.features) for x, y in zip(sa, sb))

    def test_insufficient_samples(self):
        g = tp.ring_graph(4, 5)
        samples = pb.synthetic_dataset(100, 4, seed=1)
        with pytest.raises(pb.ProblemError, match="need"):
            pb.partition(samples, g, per_user=20, seed=1)

    def test_zero_per_user_rejected(self):
        g = tp.ring_graph(4, 5)
        samples = pb.synthetic_dataset(100, 4, seed=1)
        with pytest.raises(pb.ProblemError, match="at least 1"):
            pb.partition(samples, g, per_user=0, seed=1)


class TestSolveReference:
    def test_pure_quadratic_minimizer(self):
        objs = [pb.QuadraticObjective(0.5, np.zeros(3)) for _ in range(4)]
        x = pb.solve_reference(objs, tol=1e-12)
        assert np.linalg.norm(x) <= 1e-10

    def test_one_dimensional_grid_search(self):
        # symmetric +/- features with imbalanced labels fix the sign of x*
        feats = np.array([[1.0], [1.0], [-1.0]])
        labels = np.array([1.0, 1.0, 0.0])
        obj = pb.LogisticObjective(feats, labels, 0.5)
        x_star = pb.solve_reference([obj], tol=1e-12)
        grid = np.linspace(-3, 3, 20001)
        vals = [obj.loss(np.array([t])) for t in grid]
        t_best = grid[int(np.argmin(vals))]
        assert x_star[0] > 0
        assert abs(x_star[0] - t_best) <= 2e-4  # grid resolution

    def test_tolerance_stability(self):
        rng = np.random.default_rng(67)
        objs = [random_objective(rng, ridge=0.4) for _ in range(5)]
        mu_total = sum(o.mu for o in objs)
        x1 = pb.solve_reference(objs, tol=1e-8)
        x2 = pb.solve_reference(objs, tol=1e-9)
        assert np.linalg.norm(x1 - x2) <= 1e-8 / mu_total + 1e-9 / mu_total

    def test_gradient_norm_met(self):
        rng = np.random.default_rng(71)
        objs = [random_objective(rng, ridge=0.2) for _ in range(3)]
        x = pb.solve_reference(objs, tol=1e-10)
        assert np.linalg.norm(pb.total_gradient(objs, x)) <= 1e-10
