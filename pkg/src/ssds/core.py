"""Shared state types, step-size schedules, projections, and run configuration."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

__all__ = [
    "DivergenceError",
    "ConfigError",
    "DecisionState",
    "UncertaintyState",
    "DualState",
    "SaddleIterate",
    "BudgetConstraint",
    "ScheduleVariant",
    "StepSchedule",
    "SsdsConfig",
    "positive_project",
    "step_size",
    "ball_project",
]


class DivergenceError(RuntimeError):
    """Raised when an iterate or gradient stops being finite."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class ConfigError(ValueError):
    """Raised for malformed configuration files or invalid parameter values."""


@dataclass
class DecisionState:
    """Decision variables: model parameter vector w and the epigraph scalar t."""

    w: np.ndarray
    t: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not np.all(np.isfinite(self.w)) or not math.isfinite(self.t):
            raise DivergenceError("non-finite decision state", component="x")

    def copy(self):
        return DecisionState(self.w.copy(), self.t)


@dataclass
class UncertaintyState:
    """Per-sample perturbation vectors, stored as an (N, m) array (row i is u^i)."""

    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 2:
            raise ValueError("u must be a 2-d array of per-sample rows")
        if not np.all(np.isfinite(self.u)):
            raise DivergenceError("non-finite perturbation", component="u")

    @property
    def num_samples(self):
        return self.u.shape[0]

    def copy(self):
        return UncertaintyState(self.u.copy())


@dataclass
class DualState:
    """Multipliers: scalar lambda for the epigraph constraint, vector v for the budgets.

    Both are kept nonnegative by positive projection in every update law.
    """

    lam: float
    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if not math.isfinite(self.lam) or not np.all(np.isfinite(self.v)):
            raise DivergenceError("non-finite multiplier", component="duals")
        if self.lam < 0 or np.any(self.v < 0):
            raise ValueError("multipliers must be nonnegative")

    def copy(self):
        return DualState(self.lam, self.v.copy())


@dataclass
class SaddleIterate:
    """Full solver state z = (x, duals, u) at step k."""

    x: DecisionState
    duals: DualState
    u: UncertaintyState
    k: int = 0

    def copy(self):
        return SaddleIterate(self.x.copy(), self.duals.copy(), self.u.copy(), self.k)


@dataclass(frozen=True)
class BudgetConstraint:
    """Norm-ball budget h(u) = ||u||_p - epsilon, for p in {1, 2, inf}."""

    norm_order: float
    epsilon: float

    def __post_init__(self):
        if self.norm_order not in (1, 2, math.inf):
            raise ValueError(f"unsupported norm order {self.norm_order}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def value(self, u):
        """h(u) for a single vector or batch of row vectors."""
        u = np.asarray(u, dtype=np.float64)
        axis = -1 if u.ndim > 1 else None
        if self.norm_order == math.inf:
            norm = np.abs(u).max(axis=axis)
        elif self.norm_order == 2:
            norm = np.linalg.norm(u, axis=axis)
        else:
            norm = np.abs(u).sum(axis=axis)
        return norm - self.epsilon


class ScheduleVariant(enum.Enum):
    ADAPTIVE_NORM = "adaptive-norm"
    EXPONENTIAL_DECAY = "exponential-decay"


@dataclass(frozen=True)
class StepSchedule:
    """Step-size sequence.

    ADAPTIVE_NORM: alpha_k = (gamma0 / k) / ||T(z_k)||_2, where T stacks the four
    update directions.  gamma_k = gamma0/k satisfies sum gamma = inf,
    sum gamma^2 < inf.

    EXPONENTIAL_DECAY: alpha_{k+1} = alpha_k * exp(-k * decay_p), unrolled to
    alpha_k = alpha0 * exp(-decay_p * k(k-1)/2).
    """

    variant: ScheduleVariant
    gamma0: float = 1.0
    decay_p: float = 0.001
    alpha0: float = 2.0

    def __post_init__(self):
        if self.gamma0 <= 0 or self.decay_p <= 0 or self.alpha0 <= 0:
            raise ValueError("schedule scale parameters must be positive")


def step_size(schedule: StepSchedule, k: int, dynamics_norm: float = 1.0) -> float:
    """Step size alpha_k for step counter k (k >= 1)."""
    if k < 1:
        raise ValueError("step counter must be >= 1")
    if schedule.variant is ScheduleVariant.ADAPTIVE_NORM:
        if not math.isfinite(dynamics_norm):
            raise DivergenceError("non-finite dynamics norm", component="T")
        if dynamics_norm <= 0:
            raise DivergenceError(
                "zero dynamics norm: fixed point reached", component="T"
            )
        return (schedule.gamma0 / k) / dynamics_norm
    # exp(-p * sum_{j=1}^{k-1} j)
    return schedule.alpha0 * math.exp(-schedule.decay_p * (k * (k - 1)) / 2.0)


def positive_project(x):
    """Componentwise max(x, 0).  Scalars in, scalars out."""
    if np.isscalar(x) or isinstance(x, float):
        if not math.isfinite(x):
            raise DivergenceError("non-finite value in positive projection")
        return x if x > 0 else 0.0
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite value in positive projection")
    return np.maximum(x, 0.0)


def _project_l1(u, radius):
    """Euclidean projection onto the l1 ball, by soft thresholding."""
    a = np.abs(u)
    if a.sum() <= radius:
        return u.copy()
    s = np.sort(a)[::-1]
    cumsum = np.cumsum(s)
    rho = np.nonzero(s > (cumsum - radius) / np.arange(1, u.size + 1))[0][-1]
    theta = (cumsum[rho] - radius) / (rho + 1.0)
    return np.sign(u) * np.maximum(a - theta, 0.0)


def ball_project(u, budget: BudgetConstraint):
    """Project u onto {v : ||v||_p <= epsilon}.  Accepts a vector or batch of rows."""
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise DivergenceError("non-finite input to ball projection", component="u")
    eps = budget.epsilon
    if budget.norm_order == math.inf:
        return np.clip(u, -eps, eps)
    if budget.norm_order == 2:
        if u.ndim > 1:
            norms = np.linalg.norm(u, axis=-1, keepdims=True)
            scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
            return u * scale
        norm = np.linalg.norm(u)
        return u if norm <= eps else u * (eps / norm)
    if u.ndim > 1:
        return np.stack([_project_l1(row, eps) for row in u])
    return _project_l1(u, eps)


_CONFIG_BOOL = {"true": True, "false": False, "1": True, "0": False}


@dataclass
class SsdsConfig:
    """Scalar configuration for the mini-batch training algorithms.

    Defaults follow the reference hyperparameters: epsilon 0.03, decay 0.001,
    lambda0 4, v0 1, C1 = C2 = 0.01, t0 1, and initial perturbation step 2.
    """

    epsilon: float = 0.03
    lr: float = 0.01
    decay_p: float = 0.001
    c1: float = 0.01
    c2: float = 0.01
    lambda0: float = 4.0
    v0: float = 1.0
    t0: float = 1.0
    alpha0: float = 2.0
    eta: float = 2.0
    include_lambda_in_v_update: bool = True
    lambda_ceiling: float = math.inf
    seed: int = 0

    def __post_init__(self):
        for name in ("epsilon", "lr", "decay_p", "lambda0", "alpha0", "eta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        for name in ("c1", "c2", "v0"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not self.lambda_ceiling > 0:
            raise ConfigError("lambda_ceiling must be positive")

    def budget(self, norm_order=math.inf):
        return BudgetConstraint(norm_order=norm_order, epsilon=self.epsilon)

    def schedule(self):
        return StepSchedule(
            ScheduleVariant.EXPONENTIAL_DECAY,
            decay_p=self.decay_p,
            alpha0=self.alpha0,
        )

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)

    def to_file(self, path):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = format(value, ".17g")
            lines.append(f"{f.name} = {value}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key == "include_lambda_in_v_update":
                try:
                    kwargs[key] = _CONFIG_BOOL[value.lower()]
                except KeyError:
                    raise ConfigError(f"{path}:{lineno}: bad boolean {value!r}")
            elif key == "seed":
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)
