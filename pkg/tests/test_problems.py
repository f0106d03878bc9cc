"""Problem instances: gradient oracles, closed-form saddle, datasets, IDX."""

import math

import numpy as np
import pytest

from ssds.core import BudgetConstraint, ball_project
from ssds.diagnostics import kkt_residual
from ssds.problems import (
    Dataset,
    IdxFormatError,
    MlpProblem,
    QuadraticSaddleProblem,
    RobustLogisticProblem,
    inner_max_oracle,
    load_idx_dataset,
    make_synthetic_dataset,
    saddle_oracle,
)

from conftest import write_idx_images, write_idx_labels


def _problem_instances():
    ds2 = make_synthetic_dataset(6, 3, 2, 1.5, seed=1)
    budget = BudgetConstraint(math.inf, 0.05)
    return [
        QuadraticSaddleProblem(ds2, budget, c=np.full(3, 0.02), a=1.3, b=0.7),
        RobustLogisticProblem(ds2, budget),
        MlpProblem(ds2, budget, hidden_sizes=(4,), seed=0),
    ]


@pytest.mark.parametrize("problem", _problem_instances(),
                         ids=["quadratic", "logistic", "mlp"])
def test_gradients_match_finite_differences(problem):
    """32 random (w, u, sample) triples, central differences, rel err <= 1e-5."""
    rng = np.random.default_rng(42)
    eps = 1e-6
    for _ in range(32):
        w = rng.normal(scale=0.5, size=problem.dim_w)
        u = rng.normal(scale=0.05, size=problem.dim_u)
        sample = problem.dataset.sample(int(rng.integers(1, 7)))

        gw = problem.grad_w(w, sample, u)
        gu = problem.grad_u(w, sample, u)
        for grad, point, which in ((gw, w, "w"), (gu, u, "u")):
            coords = rng.choice(point.size, size=min(10, point.size),
                                replace=False)
            for i in coords:
                pp, pm = point.copy(), point.copy()
                pp[i] += eps
                pm[i] -= eps
                if which == "w":
                    fd = (problem.loss(pp, sample, u)
                          - problem.loss(pm, sample, u)) / (2 * eps)
                else:
                    fd = (problem.loss(w, sample, pp)
                          - problem.loss(w, sample, pm)) / (2 * eps)
                scale = max(1.0, abs(fd))
                assert abs(grad[i] - fd) / scale <= 1e-5


def test_quadratic_hand_values():
    ds = Dataset(np.array([[1.0, 0.0]]), np.array([0]), 1)
    p = QuadraticSaddleProblem(ds, BudgetConstraint(math.inf, 0.03),
                               c=np.array([0.0, 0.0]), a=2.0, b=3.0)
    w = np.array([0.5, 0.5])
    u = np.array([0.1, -0.2])
    # a||w-I||^2 - b||u-c||^2 = 2*0.5 - 3*0.05 = 0.85
    assert p.loss(w, ds.sample(1), u) == pytest.approx(0.85)
    np.testing.assert_allclose(p.grad_w(w, ds.sample(1), u), [-2.0, 2.0])
    np.testing.assert_allclose(p.grad_u(w, ds.sample(1), u), [-0.6, 1.2])


def test_quadratic_convex_concave_midpoints(quadratic_problem):
    """Midpoint inequality along 100 random segments: convex in w, concave
    in u."""
    p = quadratic_problem
    rng = np.random.default_rng(7)
    sample = p.dataset.sample(1)
    for _ in range(100):
        w1, w2 = rng.normal(size=(2, p.dim_w))
        u1, u2 = rng.normal(scale=0.1, size=(2, p.dim_u))
        u_fix = rng.normal(scale=0.1, size=p.dim_u)
        w_fix = rng.normal(size=p.dim_w)
        mid_w = p.loss((w1 + w2) / 2, sample, u_fix)
        assert mid_w <= (p.loss(w1, sample, u_fix)
                         + p.loss(w2, sample, u_fix)) / 2 + 1e-12
        mid_u = p.loss(w_fix, sample, (u1 + u2) / 2)
        assert mid_u >= (p.loss(w_fix, sample, u1)
                         + p.loss(w_fix, sample, u2)) / 2 - 1e-12


class TestInnerMaxOracle:
    def _problem(self, c, p_norm=math.inf, b=1.0):
        ds = Dataset(np.zeros((1, len(c))), np.array([0]), 1)
        return QuadraticSaddleProblem(
            ds, BudgetConstraint(p_norm, 0.03), c=np.asarray(c), b=b)

    def test_interior_center(self):
        u_star, _ = inner_max_oracle(self._problem([0.01]), np.zeros(1))
        np.testing.assert_allclose(u_star, [0.01])

    def test_clamped_center(self):
        u_star, _ = inner_max_oracle(self._problem([0.10]), np.zeros(1))
        np.testing.assert_allclose(u_star, [0.03])

    def test_l2_center_frozen_grid_value(self):
        # argmax of -||u - c||^2 over the 0.03 l2-ball for c=(0.05,-0.05):
        # grid search at resolution 1e-4 over the ball froze (0.0212, -0.0212)
        u_star, _ = inner_max_oracle(
            self._problem([0.05, -0.05], p_norm=2), np.zeros(2))
        np.testing.assert_allclose(u_star, [0.021213203435596424,
                                            -0.021213203435596424],
                                   atol=1e-12)
        np.testing.assert_allclose(u_star, [0.0212, -0.0212], atol=1e-4)

    def test_beats_random_feasible_points(self, quadratic_problem):
        p = quadratic_problem
        w = np.array([0.3, -0.2])
        u_star, value = inner_max_oracle(p, w)
        rng = np.random.default_rng(11)
        idx = np.arange(len(p.dataset))
        for _ in range(1000):
            u = ball_project(rng.uniform(-0.1, 0.1, size=2), p.budget)
            candidate = p.batch_terms(
                w, np.broadcast_to(u, (len(idx), 2)), idx).losses.sum()
            assert candidate <= value + 1e-12


class TestSaddleOracle:
    def test_single_sample_interior(self):
        ds = Dataset(np.zeros((1, 1)), np.array([0]), 1)
        p = QuadraticSaddleProblem(ds, BudgetConstraint(math.inf, 0.03),
                                   c=np.array([0.01]))
        z = saddle_oracle(p)
        np.testing.assert_allclose(z.x.w, [0.0], atol=1e-15)
        np.testing.assert_allclose(z.u.u, [[0.01]], atol=1e-15)
        assert z.duals.lam == 1.0
        assert z.duals.v[0] == 0.0
        # u* attains the unconstrained max, so the inner value is exactly 0
        assert z.x.t == pytest.approx(0.0, abs=1e-15)
        assert kkt_residual(p, z).max_residual() <= 1e-9

    def test_grid_search_agrees(self):
        """Independent dense grid over (w, u) confirms the closed form."""
        ds = Dataset(np.array([[0.2], [0.4]]), np.array([0, 1]), 2)
        p = QuadraticSaddleProblem(ds, BudgetConstraint(math.inf, 0.03),
                                   c=np.array([0.05]))
        z = saddle_oracle(p)
        grid_w = np.linspace(0.0, 0.6, 6001)
        obj = [
            sum(p.a * (w - x) ** 2 for x in (0.2, 0.4))
            - 2 * p.b * (0.03 - 0.05) ** 2
            for w in grid_w
        ]
        w_grid = grid_w[int(np.argmin(obj))]
        assert abs(z.x.w[0] - w_grid) <= 1e-4
        grid_u = np.linspace(-0.03, 0.03, 601)
        inner = [-p.b * (u - 0.05) ** 2 for u in grid_u]
        assert abs(z.u.u[0, 0] - grid_u[int(np.argmax(inner))]) <= 1e-4

    def test_zero_center(self):
        ds = Dataset(np.zeros((2, 2)), np.array([0, 1]), 2)
        p = QuadraticSaddleProblem(ds, BudgetConstraint(math.inf, 0.03),
                                   c=np.zeros(2))
        z = saddle_oracle(p)
        assert not z.u.u.any()
        assert not z.duals.v.any()

    def test_center_on_boundary(self):
        ds = Dataset(np.zeros((1, 2)), np.array([0]), 1)
        c = np.array([0.03, -0.03])
        p = QuadraticSaddleProblem(ds, BudgetConstraint(math.inf, 0.03), c=c)
        z = saddle_oracle(p)
        np.testing.assert_allclose(z.u.u[0], c, atol=1e-15)
        assert z.duals.v[0] == pytest.approx(0.0, abs=1e-15)

    def test_kkt_exact_at_oracle(self, quadratic_problem):
        z = saddle_oracle(quadratic_problem)
        assert kkt_residual(quadratic_problem, z).max_residual() <= 1e-9
        # v* = 2 b (|c_j| - eps) under uniform overrun: 2 * 1 * 0.02
        np.testing.assert_allclose(z.duals.v, 0.04)

    def test_nonuniform_overrun_rejected(self):
        ds = Dataset(np.zeros((1, 2)), np.array([0]), 1)
        p = QuadraticSaddleProblem(ds, BudgetConstraint(math.inf, 0.03),
                                   c=np.array([0.05, -0.04]))
        with pytest.raises(ValueError, match="subgradient convention"):
            saddle_oracle(p)

    def test_l2_budget_general_center(self):
        ds = Dataset(np.zeros((1, 2)), np.array([0]), 1)
        c = np.array([0.05, -0.04])
        p = QuadraticSaddleProblem(ds, BudgetConstraint(2, 0.03), c=c)
        z = saddle_oracle(p)
        assert kkt_residual(p, z).max_residual() <= 1e-9
        assert z.duals.v[0] == pytest.approx(
            2 * p.b * (np.linalg.norm(c) - 0.03))


class TestSyntheticDataset:
    def test_deterministic(self):
        a = make_synthetic_dataset(100, 2, 2, 2.0, seed=7)
        b = make_synthetic_dataset(100, 2, 2, 2.0, seed=7)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = make_synthetic_dataset(100, 2, 2, 2.0, seed=7)
        b = make_synthetic_dataset(100, 2, 2, 2.0, seed=8)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            make_synthetic_dataset(0, 2, 2, 2.0, seed=7)

    def test_separable_by_logistic_regression(self):
        """Independent separability oracle: plain logistic regression fits
        the blobs to >= 99% accuracy."""
        from sklearn.linear_model import LogisticRegression

        ds = make_synthetic_dataset(100, 2, 2, 2.0, seed=7)
        clf = LogisticRegression().fit(ds.inputs, ds.labels)
        assert clf.score(ds.inputs, ds.labels) >= 0.99

    def test_sample_ids_contiguous(self):
        ds = make_synthetic_dataset(5, 2, 2, 2.0, seed=0)
        assert [s.id for s in ds.samples] == [1, 2, 3, 4, 5]


class TestDataset:
    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), np.array([0, 5]), 2)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan, 0.0]]), np.array([0]), 1)

    def test_immutable(self):
        ds = make_synthetic_dataset(3, 2, 2, 1.0, seed=0)
        with pytest.raises(ValueError):
            ds.inputs[0, 0] = 5.0


class TestIdxLoader:
    def _write_pair(self, tmp_path, n=4, rows=3, cols=3):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
        labels = rng.integers(0, 10, size=n, dtype=np.uint8)
        write_idx_images(tmp_path / "img.idx", images)
        write_idx_labels(tmp_path / "lab.idx", labels)
        return images, labels

    def test_round_trip_and_scaling(self, tmp_path):
        images, labels = self._write_pair(tmp_path)
        ds = load_idx_dataset(tmp_path / "img.idx", tmp_path / "lab.idx")
        assert len(ds) == 4 and ds.dim == 9
        np.testing.assert_allclose(
            ds.inputs, images.reshape(4, 9) / 255.0, rtol=1e-15)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_limit(self, tmp_path):
        self._write_pair(tmp_path)
        assert len(load_idx_dataset(tmp_path / "img.idx",
                                    tmp_path / "lab.idx", limit=2)) == 2
        assert len(load_idx_dataset(tmp_path / "img.idx",
                                    tmp_path / "lab.idx", limit=99)) == 4

    def test_bad_magic(self, tmp_path):
        self._write_pair(tmp_path)
        data = (tmp_path / "img.idx").read_bytes()
        (tmp_path / "img.idx").write_bytes(b"\x00\x00\x09\x99" + data[4:])
        with pytest.raises(IdxFormatError, match="bad magic"):
            load_idx_dataset(tmp_path / "img.idx", tmp_path / "lab.idx")

    def test_truncated(self, tmp_path):
        self._write_pair(tmp_path)
        data = (tmp_path / "img.idx").read_bytes()
        (tmp_path / "img.idx").write_bytes(data[:-5])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx_dataset(tmp_path / "img.idx", tmp_path / "lab.idx")

    def test_count_mismatch(self, tmp_path):
        self._write_pair(tmp_path)
        write_idx_labels(tmp_path / "lab.idx", np.zeros(7, dtype=np.uint8))
        with pytest.raises(IdxFormatError, match="count"):
            load_idx_dataset(tmp_path / "img.idx", tmp_path / "lab.idx")


def test_constraint_subgrad_conventions(quadratic_problem):
    p = quadratic_problem
    u = np.array([0.05, -0.02])
    np.testing.assert_array_equal(p.constraint_subgrad(u), [1.0, -1.0])
    np.testing.assert_array_equal(
        p.constraint_subgrad(u, true_subgradient=True), [1.0, 0.0])
    assert not p.constraint_subgrad(np.zeros(2)).any()  # sgn(0) = 0
