"""Sign-gradient attack baselines and attacked-accuracy evaluation."""

import math

import numpy as np
import pytest

from ssds.baselines import (
    AttackKind,
    AttackSpec,
    evaluate_under_attack,
    fgsm,
    pgd,
)
from ssds.core import BudgetConstraint
from ssds.harness import train_natural
from ssds.problems import (
    BatchTerms,
    Dataset,
    RobustLogisticProblem,
    RobustProblem,
    make_synthetic_dataset,
)


def _unit_range_problem(seed=0, n=40):
    """Logistic problem on [0,1]-valued inputs (image-style)."""
    rng = np.random.default_rng(seed)
    half = n // 2
    inputs = np.clip(np.concatenate([
        rng.normal(0.3, 0.08, size=(half, 4)),
        rng.normal(0.7, 0.08, size=(n - half, 4)),
    ]), 0.0, 1.0)
    labels = np.array([0] * half + [1] * (n - half))
    ds = Dataset(inputs, labels, 2)
    return RobustLogisticProblem(ds, BudgetConstraint(math.inf, 0.1))


def _trained(problem, epochs=100):
    return train_natural(problem, lr=0.1, epochs=epochs, batch_size=10,
                         rng=np.random.default_rng(0))


class TestAttackSpec:
    def test_overshooting_step_warns(self):
        with pytest.warns(UserWarning, match="diameter"):
            AttackSpec(AttackKind.PGD, epsilon=0.01, step_eta=0.05)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            AttackSpec(AttackKind.FGSM, epsilon=-0.1)
        with pytest.raises(ValueError):
            AttackSpec(AttackKind.PGD, epsilon=0.1, steps=0)


class TestFgsm:
    def test_zero_gradient_unchanged(self):
        class FlatProblem(RobustProblem):
            def __init__(self, dataset, budget):
                self.dataset = dataset
                self.budget = budget
                self.dim_w = 1
                self.dim_u = dataset.dim

            def batch_terms(self, w, u_rows, idx):
                return BatchTerms(np.zeros(len(idx)), np.zeros(1),
                                  np.zeros_like(u_rows))

        ds = Dataset(np.full((2, 3), 0.5), np.array([0, 0]), 1)
        p = FlatProblem(ds, BudgetConstraint(math.inf, 0.1))
        out = fgsm(p, np.zeros(1), ds.sample(1),
                   AttackSpec(AttackKind.FGSM, 0.1))
        np.testing.assert_array_equal(out, ds.inputs[0])

    def test_epsilon_zero_unchanged(self):
        p = _unit_range_problem()
        out = fgsm(p, _trained(p), p.dataset.sample(1),
                   AttackSpec(AttackKind.FGSM, 0.0))
        np.testing.assert_array_equal(out, p.dataset.inputs[0])

    def test_within_ball_and_unit_box(self):
        p = _unit_range_problem()
        w = _trained(p)
        spec = AttackSpec(AttackKind.FGSM, 0.1)
        for sid in range(1, 11):
            out = fgsm(p, w, p.dataset.sample(sid), spec)
            clean = p.dataset.inputs[sid - 1]
            assert np.abs(out - clean).max() <= 0.1 + 1e-15
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_degrades_trained_logistic(self):
        p = _unit_range_problem()
        w = _trained(p)
        clean = evaluate_under_attack(p, w, None, None)
        attacked = evaluate_under_attack(
            p, w, None, AttackSpec(AttackKind.FGSM, 0.1))
        assert attacked <= clean


class TestPgd:
    def test_single_step_equals_fgsm_bitwise(self):
        p = _unit_range_problem()
        w = _trained(p)
        fg_spec = AttackSpec(AttackKind.FGSM, 0.1)
        pgd_spec = AttackSpec(AttackKind.PGD, 0.1, step_eta=0.1, steps=1,
                              random_start=False)
        for sid in range(1, 6):
            a = fgsm(p, w, p.dataset.sample(sid), fg_spec)
            b = pgd(p, w, p.dataset.sample(sid), pgd_spec)
            np.testing.assert_array_equal(a, b)

    def test_ball_and_box_invariants(self):
        p = _unit_range_problem()
        w = _trained(p)
        spec = AttackSpec(AttackKind.PGD, 0.1, step_eta=0.03, steps=10)
        rng = np.random.default_rng(7)
        for sid in range(1, 11):
            out = pgd(p, w, p.dataset.sample(sid), spec, rng=rng)
            clean = p.dataset.inputs[sid - 1]
            assert np.abs(out - clean).max() <= 0.1 + 1e-12
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_unbounded_features_not_clamped(self):
        """Gaussian-feature data is outside [0,1]; attacks must not clip it."""
        ds = make_synthetic_dataset(40, 2, 2, 3.0, seed=1)
        p = RobustLogisticProblem(ds, BudgetConstraint(math.inf, 0.1))
        w = _trained(p)
        spec = AttackSpec(AttackKind.PGD, 0.1, step_eta=0.03, steps=5,
                          random_start=False)
        out = pgd(p, w, ds.sample(1), spec)
        assert np.abs(out - ds.inputs[0]).max() <= 0.1 + 1e-12

    def test_kind_checked(self):
        p = _unit_range_problem()
        with pytest.raises(ValueError):
            pgd(p, np.zeros(p.dim_w), p.dataset.sample(1),
                AttackSpec(AttackKind.FGSM, 0.1))


class TestEvaluateUnderAttack:
    def test_constant_model_balanced_data(self):
        """Zero weights predict one class; balanced labels give 0.5."""
        p = _unit_range_problem()
        assert evaluate_under_attack(p, np.zeros(p.dim_w), None, None) == 0.5

    def test_deterministic_under_seed(self):
        p = _unit_range_problem()
        w = _trained(p)
        spec = AttackSpec(AttackKind.PGD, 0.1, step_eta=0.03, steps=5)
        a = evaluate_under_attack(p, w, None, spec,
                                  rng=np.random.default_rng(3))
        b = evaluate_under_attack(p, w, None, spec,
                                  rng=np.random.default_rng(3))
        assert a == b

    def test_rebinds_test_dataset(self):
        p = _unit_range_problem(seed=0)
        w = _trained(p)
        other = _unit_range_problem(seed=1).dataset
        acc = evaluate_under_attack(p, w, other, None)
        assert 0.0 <= acc <= 1.0

    def test_attack_strength_monotone(self):
        """More iterations never help the model (within 1 pp noise)."""
        p = _unit_range_problem(n=100)
        w = _trained(p, epochs=60)
        fg = evaluate_under_attack(p, w, None,
                                   AttackSpec(AttackKind.FGSM, 0.1))
        pgd10 = evaluate_under_attack(
            p, w, None, AttackSpec(AttackKind.PGD, 0.1, step_eta=0.025,
                                   steps=10),
            rng=np.random.default_rng(0))
        pgd20 = evaluate_under_attack(
            p, w, None, AttackSpec(AttackKind.PGD, 0.1, step_eta=0.025,
                                   steps=20),
            rng=np.random.default_rng(0))
        assert pgd20 <= pgd10 + 0.01
        assert pgd10 <= fg + 0.01
