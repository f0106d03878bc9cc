"""Sign-gradient attack baselines (single-step and iterated projected) and
accuracy evaluation under attack."""

from __future__ import annotations

import copy
import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import BudgetConstraint, ball_project
from .problems import Dataset, RobustProblem

__all__ = [
    "AttackKind",
    "AttackSpec",
    "fgsm",
    "pgd",
    "evaluate_under_attack",
]


class AttackKind(enum.Enum):
    FGSM = "fgsm"
    PGD = "pgd"


@dataclass(frozen=True)
class AttackSpec:
    """Sup-norm attack description: budget, per-step size, iteration count."""

    kind: AttackKind
    epsilon: float
    step_eta: float = 0.007
    steps: int = 20
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0 or self.step_eta < 0 or self.steps < 1:
            raise ValueError("attack parameters must be nonnegative, steps >= 1")
        if self.kind is AttackKind.PGD and self.step_eta > 2 * self.epsilon:
            warnings.warn("step size exceeds the ball diameter; extra steps "
                          "are wasted", stacklevel=2)


def _unit_range(dataset):
    return dataset.inputs.min() >= 0.0 and dataset.inputs.max() <= 1.0


def _clamp(x_adv, dataset):
    # pixel-style data stays in [0, 1]; unbounded feature data is left alone
    return np.clip(x_adv, 0.0, 1.0) if _unit_range(dataset) else x_adv


def _fgsm_batch(problem, w, idx, epsilon):
    x = problem.dataset.inputs[idx]
    grad = problem.batch_terms(w, np.zeros_like(x), idx).grad_u
    return _clamp(x + epsilon * np.sign(grad), problem.dataset)


def _pgd_batch(problem, w, idx, spec: AttackSpec, rng):
    x = problem.dataset.inputs[idx]
    eps = spec.epsilon
    if eps == 0:
        return x.copy()
    budget = BudgetConstraint(math.inf, eps)
    if spec.random_start:
        u = rng.uniform(-eps, eps, size=x.shape)
    else:
        u = np.zeros_like(x)
    x_adv = x
    for _ in range(spec.steps):
        grad = problem.batch_terms(w, u, idx).grad_u
        u = ball_project(u + spec.step_eta * np.sign(grad), budget)
        x_adv = _clamp(x + u, problem.dataset)
        u = x_adv - x
    return x_adv


def fgsm(problem: RobustProblem, w, sample, spec: AttackSpec):
    """Single sign-gradient step of size epsilon, clamped to [0, 1]."""
    if spec.kind is not AttackKind.FGSM:
        raise ValueError("spec is not a single-step attack")
    x = problem.dataset.inputs[sample.id - 1]
    if spec.epsilon == 0:
        return x.copy()
    return _fgsm_batch(problem, w, [sample.id - 1], spec.epsilon)[0]


def pgd(problem: RobustProblem, w, sample, spec: AttackSpec, rng=None):
    """Iterated sign-gradient ascent with projection onto the epsilon ball
    and [0, 1] clamping each step."""
    if spec.kind is not AttackKind.PGD:
        raise ValueError("spec is not an iterated attack")
    rng = rng if rng is not None else np.random.default_rng(0)
    return _pgd_batch(problem, w, [sample.id - 1], spec, rng)[0]


def evaluate_under_attack(problem: RobustProblem, w, dataset: Dataset | None,
                          spec: AttackSpec | None, rng=None) -> float:
    """Accuracy of the classifier at w on (possibly attacked) inputs.

    spec=None evaluates clean accuracy.  A dataset other than the problem's
    own re-binds the evaluation to that data.
    """
    if dataset is not None and dataset is not problem.dataset:
        problem = copy.copy(problem)
        problem.dataset = dataset
    ds = problem.dataset
    idx = np.arange(len(ds))
    if spec is None:
        x = ds.inputs
    elif spec.kind is AttackKind.FGSM:
        x = ds.inputs if spec.epsilon == 0 else _fgsm_batch(
            problem, w, idx, spec.epsilon)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        x = _pgd_batch(problem, w, idx, spec, rng)
    return float((problem.predict(w, x) == ds.labels).mean())
