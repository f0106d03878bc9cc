"""Robust training problems: the loss/constraint triple with gradient oracles.

Each problem exposes per-sample loss L(I + u, y, w), its gradients in w and u,
and the budget constraint h(u) = ||u||_p - eps.  The quadratic instance is
strictly convex-concave and has a closed-form saddle point for testing; the
logistic and MLP instances are the learned-model cases.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import MlpModel
from .core import BudgetConstraint, DecisionState, DualState, SaddleIterate, \
    UncertaintyState, ball_project

__all__ = [
    "Sample",
    "Dataset",
    "RobustProblem",
    "QuadraticSaddleProblem",
    "RobustLogisticProblem",
    "MlpProblem",
    "BatchTerms",
    "inner_max_oracle",
    "saddle_oracle",
    "make_synthetic_dataset",
    "load_idx_dataset",
    "IdxFormatError",
]


@dataclass(frozen=True)
class Sample:
    """One training sample: input vector, class label, and 1-based index."""

    input: np.ndarray
    label: int
    id: int


class Dataset:
    """Immutable collection of samples, stored as (N, m) inputs and (N,) labels."""

    def __init__(self, inputs, labels, num_classes):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = int(num_classes)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be (N, m) with matching labels")
        if len(self.inputs) == 0:
            raise ValueError("dataset must be non-empty")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite sample inputs")
        if self.labels.min() < 0 or self.labels.max() >= num_classes:
            raise ValueError("label outside class range")
        self.inputs.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.inputs)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def sample(self, i):
        """Sample with 1-based id i."""
        return Sample(self.inputs[i - 1], int(self.labels[i - 1]), i)

    @property
    def samples(self):
        return [self.sample(i) for i in range(1, len(self) + 1)]


@dataclass(frozen=True)
class BatchTerms:
    """Batch evaluation bundle: per-sample losses, summed w-gradient, u-gradient rows."""

    losses: np.ndarray
    grad_w_sum: np.ndarray
    grad_u: np.ndarray


class RobustProblem:
    """Interface: per-sample loss with w/u gradients plus the budget constraint.

    Subclasses set `dataset`, `budget`, `dim_w`, `dim_u` and implement
    `batch_terms`; the scalar per-sample operations below are derived from it.
    All evaluation operations are pure in (w, u) and thread-safe.
    """

    dataset: Dataset
    budget: BudgetConstraint
    dim_w: int
    dim_u: int

    def batch_terms(self, w, u_rows, idx) -> BatchTerms:
        """Losses and gradients for samples at 0-based positions idx with rows u_rows."""
        raise NotImplementedError

    def loss(self, w, sample: Sample, u):
        return float(self.batch_terms(w, u[None, :], [sample.id - 1]).losses[0])

    def grad_w(self, w, sample: Sample, u):
        return self.batch_terms(w, u[None, :], [sample.id - 1]).grad_w_sum

    def grad_u(self, w, sample: Sample, u):
        return self.batch_terms(w, u[None, :], [sample.id - 1]).grad_u[0]

    def constraint(self, u):
        return self.budget.value(u)

    def predict(self, w, inputs):
        """Class predictions for classifier problems."""
        raise NotImplementedError("not a classifier problem")

    def constraint_subgrad(self, u, true_subgradient=False):
        """Direction used against v in the u update.

        Default is componentwise sgn(u) with sgn(0)=0 for the sup-norm budget;
        `true_subgradient=True` instead spreads weight over the max-magnitude
        coordinates.  For the 2- and 1-norms the usual (sub)gradients apply.
        """
        u = np.asarray(u, dtype=np.float64)
        p = self.budget.norm_order
        if p == math.inf and not true_subgradient:
            return np.sign(u)
        if p == math.inf:
            a = np.abs(u)
            mask = (a == a.max()) & (a > 0)
            n_active = mask.sum()
            return np.sign(u) * mask / max(n_active, 1)
        if p == 2:
            norm = np.linalg.norm(u)
            return u / norm if norm > 0 else np.zeros_like(u)
        return np.sign(u)


class QuadraticSaddleProblem(RobustProblem):
    """L(w, u_i) = a*||w - I_i||^2 - b*||u_i - c||^2: strictly convex in w,
    strictly concave in u, with a closed-form saddle point."""

    def __init__(self, dataset: Dataset, budget: BudgetConstraint, c, a=1.0, b=1.0):
        if a <= 0 or b <= 0:
            raise ValueError("curvatures must be positive")
        self.dataset = dataset
        self.budget = budget
        self.c = np.asarray(c, dtype=np.float64)
        if self.c.shape != (dataset.dim,):
            raise ValueError("target c must match the input dimension")
        self.a = float(a)
        self.b = float(b)
        self.dim_w = dataset.dim
        self.dim_u = dataset.dim

    def batch_terms(self, w, u_rows, idx):
        diff = w - self.dataset.inputs[idx]
        du = u_rows - self.c
        losses = self.a * (diff ** 2).sum(axis=1) - self.b * (du ** 2).sum(axis=1)
        return BatchTerms(
            losses=losses,
            grad_w_sum=2.0 * self.a * diff.sum(axis=0),
            grad_u=-2.0 * self.b * du,
        )


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class RobustLogisticProblem(RobustProblem):
    """Cross entropy of a linear softmax classifier on perturbed inputs.

    w flattens to a (m, K) weight matrix followed by a K-vector bias.
    Convex in w; convex (not concave) in u.
    """

    def __init__(self, dataset: Dataset, budget: BudgetConstraint):
        self.dataset = dataset
        self.budget = budget
        self.dim_u = dataset.dim
        self.dim_w = dataset.dim * dataset.num_classes + dataset.num_classes

    def _unpack(self, w):
        m, k = self.dataset.dim, self.dataset.num_classes
        return w[: m * k].reshape(m, k), w[m * k:]

    def batch_terms(self, w, u_rows, idx):
        W, bias = self._unpack(w)
        x = self.dataset.inputs[idx] + u_rows
        y = self.dataset.labels[idx]
        logits = x @ W + bias
        zmax = logits.max(axis=1, keepdims=True)
        logsumexp = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
        losses = logsumexp - logits[np.arange(len(y)), y]
        delta = _softmax(logits)
        delta[np.arange(len(y)), y] -= 1.0
        grad_W = x.T @ delta
        grad_bias = delta.sum(axis=0)
        return BatchTerms(
            losses=losses,
            grad_w_sum=np.concatenate([grad_W.ravel(), grad_bias]),
            grad_u=delta @ W.T,
        )

    def predict(self, w, inputs):
        W, bias = self._unpack(w)
        return (np.asarray(inputs) @ W + bias).argmax(axis=1)

    def accuracy(self, w, perturbation=None):
        x = self.dataset.inputs
        if perturbation is not None:
            x = x + perturbation
        return float((self.predict(w, x) == self.dataset.labels).mean())


class MlpProblem(RobustProblem):
    """ReLU MLP classifier with autodiff gradients; w is the flattened parameters."""

    def __init__(self, dataset: Dataset, budget: BudgetConstraint,
                 hidden_sizes=(128, 64), seed=0):
        self.dataset = dataset
        self.budget = budget
        sizes = [dataset.dim, *hidden_sizes, dataset.num_classes]
        self.model = MlpModel(sizes, rng=np.random.default_rng(seed))
        self.dim_u = dataset.dim
        self.dim_w = self.model.num_params

    def initial_w(self):
        return self.model.flatten()

    def batch_terms(self, w, u_rows, idx):
        self.model.unflatten(w)
        x = self.dataset.inputs[idx] + u_rows
        y = self.dataset.labels[idx]
        losses, grad_x, grad_w = self.model.loss_and_grads(x, y)
        return BatchTerms(losses=losses, grad_w_sum=grad_w, grad_u=grad_x)

    def predict(self, w, inputs):
        self.model.unflatten(w)
        return self.model.predict(inputs)

    def accuracy(self, w, perturbation=None):
        x = self.dataset.inputs
        if perturbation is not None:
            x = x + perturbation
        return float((self.predict(w, x) == self.dataset.labels).mean())


def inner_max_oracle(problem: QuadraticSaddleProblem, w):
    """Exact maximizer of the concave inner problem over the budget ball.

    The objective is an isotropic concave quadratic centered at c, so the
    constrained argmax is the Euclidean projection of c onto the ball; it is
    shared by every sample.  Returns (u_star, summed value at w).
    """
    u_star = ball_project(problem.c, problem.budget)
    terms = problem.batch_terms(
        np.asarray(w, dtype=np.float64),
        np.broadcast_to(u_star, problem.dataset.inputs.shape),
        np.arange(len(problem.dataset)),
    )
    return u_star, float(terms.losses.sum())


def saddle_oracle(problem: QuadraticSaddleProblem,
                  true_subgradient=False) -> SaddleIterate:
    """Closed-form primal-dual saddle point of the quadratic instance.

    w* is the sample mean (minimizer of the summed quadratic), u* the
    projection of c onto the ball, lambda* = 1 (stationarity in t), t* the
    summed inner-max value, and v* is read off stationarity in u:
    grad_u L(u*) = v* . constraint_subgrad(u*).  Raises ValueError when no
    single v* satisfies that equation under the chosen subgradient convention
    (e.g. a sup-norm budget where the clamped components of c overshoot the
    ball by unequal amounts).
    """
    ds, budget = problem.dataset, problem.budget
    w_star = ds.inputs.mean(axis=0)
    u_star = ball_project(problem.c, budget)
    grad_u = 2.0 * problem.b * (problem.c - u_star)
    sub = problem.constraint_subgrad(u_star, true_subgradient=true_subgradient)
    if np.allclose(grad_u, 0.0, atol=1e-15):
        v_star = 0.0
    else:
        active = np.abs(sub) > 1e-15
        if not np.any(active) or np.any(~active & (np.abs(grad_u) > 1e-12)):
            raise ValueError("no stationary v* under this subgradient convention")
        ratios = grad_u[active] / sub[active]
        v_star = float(ratios[0])
        if v_star < 0 or not np.allclose(ratios, v_star, rtol=1e-9, atol=1e-12):
            raise ValueError("no stationary v* under this subgradient convention")
    _, t_star = inner_max_oracle(problem, w_star)
    n = len(ds)
    return SaddleIterate(
        x=DecisionState(w=w_star, t=t_star),
        duals=DualState(lam=1.0, v=np.full(n, v_star)),
        u=UncertaintyState(np.broadcast_to(u_star, (n, ds.dim)).copy()),
    )


def make_synthetic_dataset(num_samples, dim, num_classes, separation, seed):
    """Deterministic Gaussian-blob classification dataset."""
    if num_samples <= 0 or dim <= 0 or num_classes <= 0 or separation <= 0:
        raise ValueError("dataset parameters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, dim))
    centers *= separation / np.maximum(
        np.linalg.norm(centers, axis=1, keepdims=True), 1e-12
    )
    labels = np.arange(num_samples) % num_classes
    inputs = centers[labels] + rng.normal(scale=0.1, size=(num_samples, dim))
    return Dataset(inputs, labels, num_classes)


class IdxFormatError(IOError):
    """Malformed IDX file: bad magic, truncation, or image/label count mismatch."""


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def load_idx_dataset(images_path, labels_path, limit=None):
    """Load big-endian IDX image/label files, pixels scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    if len(img) < 16:
        raise IdxFormatError(f"{images_path}: truncated header")
    magic, n, rows, cols = struct.unpack_from(">IIII", img)
    if magic != _IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}")
    if len(lab) < 8:
        raise IdxFormatError(f"{labels_path}: truncated header")
    lmagic, ln = struct.unpack_from(">II", lab)
    if lmagic != _IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{lmagic:08x}")
    if n != ln:
        raise IdxFormatError(f"image count {n} != label count {ln}")
    if len(img) < 16 + n * rows * cols:
        raise IdxFormatError(f"{images_path}: truncated data")
    if len(lab) < 8 + n:
        raise IdxFormatError(f"{labels_path}: truncated data")
    count = n if limit is None else min(n, limit)
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=count, offset=8)
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), num_classes=10)
