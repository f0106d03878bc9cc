"""Coupled primal-dual-uncertainty update laws, mini-batch training loops,
and attack generators.

The continuous-family step (`ssds_step`) implements the four update laws with
an adaptive step size; the mini-batch epoch functions implement the practical
training variants (plain, multiplier-free, and projected), and the attack
functions run the perturbation/multiplier subset of the dynamics against
frozen model parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    BudgetConstraint,
    DecisionState,
    DivergenceError,
    DualState,
    SaddleIterate,
    ScheduleVariant,
    SsdsConfig,
    StepSchedule,
    UncertaintyState,
    ball_project,
    positive_project,
    step_size,
)
from .problems import QuadraticSaddleProblem, RobustProblem

__all__ = [
    "UpdateDirections",
    "EpochReport",
    "compute_directions",
    "ssds_step",
    "run_ssds",
    "run_ssds_ensemble",
    "weighted_distance",
    "minibatch_ssds_epoch",
    "minibatch_sgda_epoch",
    "minibatch_ssds_p_epoch",
    "ssds_attack",
    "sgda_attack",
    "LAMBDA_DIVERGENCE_CEILING",
]

LAMBDA_DIVERGENCE_CEILING = 1e12


@dataclass(frozen=True)
class UpdateDirections:
    """The stacked dynamics T(z): descent direction for x, ascent directions
    for lambda, u, and v."""

    dx: np.ndarray  # (dim_w + 1,), t-component last
    dlambda: float
    du: np.ndarray  # (N, m)
    dv: np.ndarray  # (N,)

    def stacked_norm(self):
        return math.sqrt(
            float(self.dx @ self.dx)
            + self.dlambda ** 2
            + float((self.du * self.du).sum())
            + float(self.dv @ self.dv)
        )


@dataclass(frozen=True)
class EpochReport:
    """Per-epoch training diagnostics."""

    epoch: int
    alpha: float
    lam: float
    t: float
    mean_loss: float
    frac_u_within_budget: float
    mean_u_delta_l2: float

    def __post_init__(self):
        if not 0.0 <= self.frac_u_within_budget <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")


def _check_finite(value, component):
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {component}", component=component)


def compute_directions(problem: RobustProblem, z: SaddleIterate, xi=None,
                       include_lambda_in_v_update=True) -> UpdateDirections:
    """Directions of the four update laws at z.

    xi is a 1-based sample id selecting the stochastic single-sample form of
    the epigraph terms, or None for the full-information (summed) form.  The
    per-sample u and v directions are always computed for every sample.
    include_lambda_in_v_update=False drops the lambda factor from the v
    direction (a documented practical simplification).
    """
    w, t = z.x.w, z.x.t
    lam, v = z.duals.lam, z.duals.v
    u = z.u.u
    all_idx = np.arange(len(problem.dataset))
    terms = problem.batch_terms(w, u, all_idx)
    _check_finite(terms.losses, "loss")
    h = problem.budget.value(u)
    sub = np.stack([problem.constraint_subgrad(row) for row in u])

    if xi is None:
        g = float(terms.losses.sum()) - t
        grad_w_g = terms.grad_w_sum
    else:
        i = xi - 1
        g = float(terms.losses[i]) - t
        single = problem.batch_terms(w, u[i][None, :], [i])
        grad_w_g = single.grad_w_sum

    dx = np.concatenate([lam * grad_w_g, [1.0 - lam]])
    dlambda = g - float(v @ h)
    du = terms.grad_u - v[:, None] * sub
    dv = lam * h if include_lambda_in_v_update else h.copy()
    _check_finite(dx, "x")
    _check_finite(dlambda, "lambda")
    _check_finite(du, "u")
    _check_finite(dv, "v")
    return UpdateDirections(dx=dx, dlambda=float(dlambda), du=du, dv=dv)


def ssds_step(problem: RobustProblem, z: SaddleIterate, xi=None,
              schedule: StepSchedule | None = None) -> SaddleIterate:
    """One step of the coupled dynamics; returns z unchanged (k incremented)
    when the stacked direction norm is zero (fixed point)."""
    if schedule is None:
        schedule = StepSchedule(ScheduleVariant.ADAPTIVE_NORM)
    d = compute_directions(problem, z, xi)
    norm = d.stacked_norm()
    k = z.k + 1
    if norm == 0.0:
        out = z.copy()
        out.k = k
        return out
    alpha = step_size(schedule, k, norm)
    w_new = z.x.w - alpha * d.dx[:-1]
    t_new = z.x.t - alpha * d.dx[-1]
    lam_new = positive_project(z.duals.lam + alpha * d.dlambda)
    u_new = z.u.u + alpha * d.du
    v_new = positive_project(z.duals.v + alpha * d.dv)
    if lam_new > LAMBDA_DIVERGENCE_CEILING:
        raise DivergenceError("lambda diverged", component="lambda")
    return SaddleIterate(
        x=DecisionState(w_new, float(t_new)),
        duals=DualState(float(lam_new), v_new),
        u=UncertaintyState(u_new),
        k=k,
    )


def weighted_distance(z: SaddleIterate, z_star: SaddleIterate) -> float:
    """The convergence proof's weighted squared distance:
    ||x - x*||^2 + ||lam - lam*||^2 + lam* ||u - u*||^2 + ||v - v*||^2."""
    dx = np.concatenate([z.x.w - z_star.x.w, [z.x.t - z_star.x.t]])
    du = z.u.u - z_star.u.u
    dv = z.duals.v - z_star.duals.v
    return (
        float(dx @ dx)
        + (z.duals.lam - z_star.duals.lam) ** 2
        + z_star.duals.lam * float((du * du).sum())
        + float(dv @ dv)
    )


def _run_ssds_quadratic(problem, z0, steps, schedule, reference, record_every):
    """Vectorized full-information loop specialized to the quadratic problem
    with the sup-norm budget and sign-convention subgradient."""
    I = problem.dataset.inputs
    a, b, c, eps = problem.a, problem.b, problem.c, problem.budget.epsilon
    gamma0 = schedule.gamma0
    w = z0.x.w.copy()
    t = z0.x.t
    lam = z0.duals.lam
    u = z0.u.u.copy()
    v = z0.duals.v.copy()
    history = []

    def snapshot(k):
        return SaddleIterate(
            DecisionState(w.copy(), t), DualState(lam, v.copy()),
            UncertaintyState(u.copy()), k,
        )

    for k in range(z0.k + 1, z0.k + steps + 1):
        diff = w - I
        du_c = u - c
        losses = a * (diff * diff).sum(axis=1) - b * (du_c * du_c).sum(axis=1)
        h = np.abs(u).max(axis=1) - eps
        dw = lam * 2.0 * a * diff.sum(axis=0)
        dt = 1.0 - lam
        dlam = losses.sum() - t - v @ h
        du = -2.0 * b * du_c - v[:, None] * np.sign(u)
        dv = lam * h
        sq = dw @ dw + dt * dt + dlam * dlam + (du * du).sum() + dv @ dv
        if sq == 0.0:
            history.append((k, weighted_distance(snapshot(k), reference)
                            if reference is not None else 0.0))
            break
        if not math.isfinite(sq):
            raise DivergenceError("non-finite dynamics", component="T")
        alpha = (gamma0 / k) / math.sqrt(sq)
        w -= alpha * dw
        t -= alpha * dt
        lam = max(lam + alpha * dlam, 0.0)
        u += alpha * du
        np.maximum(v + alpha * dv, 0.0, out=v)
        if record_every and (k % record_every == 0 or k == z0.k + steps):
            history.append((
                k,
                weighted_distance(snapshot(k), reference)
                if reference is not None else float("nan"),
            ))
    return snapshot(k), history


def run_ssds(problem: RobustProblem, z0: SaddleIterate, steps: int,
             schedule: StepSchedule | None = None, reference=None,
             record_every=0):
    """Iterate the full-information dynamics for `steps` steps.

    Returns (final iterate, history) where history rows are (k, weighted
    squared distance to `reference`) at every `record_every` steps.  The
    quadratic test problem with a sup-norm budget takes a vectorized fast
    path equivalent to the generic one (up to summation-order rounding).
    """
    if schedule is None:
        schedule = StepSchedule(ScheduleVariant.ADAPTIVE_NORM)
    if (
        isinstance(problem, QuadraticSaddleProblem)
        and problem.budget.norm_order == math.inf
        and schedule.variant is ScheduleVariant.ADAPTIVE_NORM
    ):
        return _run_ssds_quadratic(problem, z0, steps, schedule, reference,
                                   record_every)
    z = z0
    history = []
    for _ in range(steps):
        z = ssds_step(problem, z, xi=None, schedule=schedule)
        if record_every and (z.k % record_every == 0 or _ == steps - 1):
            history.append((
                z.k,
                weighted_distance(z, reference)
                if reference is not None else float("nan"),
            ))
    return z, history


def run_ssds_ensemble(problem: QuadraticSaddleProblem, z0_list, steps,
                      schedule: StepSchedule | None = None, reference=None,
                      record_at=()):
    """Run independent full-information trajectories side by side.

    Vectorizes the quadratic fast path over a leading seed axis (each
    trajectory keeps its own adaptive step size); equivalent to running
    run_ssds per initial state up to summation-order rounding.  Returns
    (final iterates, records)
    where records maps each step in record_at to the per-trajectory weighted
    squared distance to `reference`.
    """
    if schedule is None:
        schedule = StepSchedule(ScheduleVariant.ADAPTIVE_NORM)
    if not (isinstance(problem, QuadraticSaddleProblem)
            and problem.budget.norm_order == math.inf
            and schedule.variant is ScheduleVariant.ADAPTIVE_NORM):
        raise ValueError("ensemble runner supports the quadratic fast path only")
    I = problem.dataset.inputs
    a, b, c, eps = problem.a, problem.b, problem.c, problem.budget.epsilon
    gamma0 = schedule.gamma0
    s = len(z0_list)
    W = np.stack([z.x.w for z in z0_list])            # (s, d)
    T = np.array([z.x.t for z in z0_list])            # (s,)
    LAM = np.array([z.duals.lam for z in z0_list])    # (s,)
    U = np.stack([z.u.u for z in z0_list])            # (s, n, d)
    V = np.stack([z.duals.v for z in z0_list])        # (s, n)
    record_at = set(record_at)
    records = {}

    def distances():
        dw = W - reference.x.w
        dU = U - reference.u.u
        dV = V - reference.duals.v
        return ((dw * dw).sum(axis=1) + (T - reference.x.t) ** 2
                + (LAM - reference.duals.lam) ** 2
                + reference.duals.lam * (dU * dU).sum(axis=(1, 2))
                + (dV * dV).sum(axis=1))

    for k in range(1, steps + 1):
        diff = W[:, None, :] - I[None, :, :]
        du_c = U - c
        losses = a * (diff * diff).sum(axis=2) - b * (du_c * du_c).sum(axis=2)
        h = np.abs(U).max(axis=2) - eps
        dW = LAM[:, None] * 2.0 * a * diff.sum(axis=1)
        dT = 1.0 - LAM
        dLAM = losses.sum(axis=1) - T - (V * h).sum(axis=1)
        dU = -2.0 * b * du_c - V[:, :, None] * np.sign(U)
        dV = LAM[:, None] * h
        sq = ((dW * dW).sum(axis=1) + dT * dT + dLAM * dLAM
              + (dU * dU).sum(axis=(1, 2)) + (dV * dV).sum(axis=1))
        if not np.all(np.isfinite(sq)):
            raise DivergenceError("non-finite dynamics", component="T")
        alpha = np.where(sq > 0, (gamma0 / k) / np.sqrt(np.maximum(sq, 1e-300)),
                         0.0)
        W -= alpha[:, None] * dW
        T -= alpha * dT
        LAM = np.maximum(LAM + alpha * dLAM, 0.0)
        U += alpha[:, None, None] * dU
        V = np.maximum(V + alpha[:, None] * dV, 0.0)
        if k in record_at:
            records[k] = distances()
    finals = [
        SaddleIterate(DecisionState(W[i].copy(), float(T[i])),
                      DualState(float(LAM[i]), V[i].copy()),
                      UncertaintyState(U[i].copy()), steps)
        for i in range(s)
    ]
    return finals, records


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _epoch(problem, state, dataset, batch_size, config, rng, *,
           use_multipliers, project_u):
    """Shared epoch body: one shuffled pass of per-batch updates.

    With use_multipliers=False this is exactly the multiplier-free variant
    (lambda treated as 1, v as 0, no t/lambda/v updates); with project_u the
    perturbations are pulled back onto the budget ball after every batch.
    """
    if batch_size > len(dataset):
        raise ValueError("batch size exceeds dataset size")
    w = state.x.w.copy()
    t = state.x.t
    lam = state.duals.lam
    v = state.duals.v.copy()
    u = state.u.u.copy()
    u_prev = state.u.u
    k = state.k + 1
    alpha = config.alpha0 * math.exp(-config.decay_p * (k * (k - 1)) / 2.0)
    budget = problem.budget
    losses_sum, losses_n = 0.0, 0

    if use_multipliers:
        t = t + alpha * (lam - 1.0)

    for idx in _batches(len(dataset), batch_size, rng):
        terms = problem.batch_terms(w, u[idx], idx)
        _check_finite(terms.losses, "loss")
        w = w - config.lr * (lam if use_multipliers else 1.0) * terms.grad_w_sum
        _check_finite(w, "w")
        if use_multipliers:
            h = budget.value(u[idx])
            v_old = v[idx]
            v[idx] = np.maximum(v_old + alpha * h, 0.0)
            u[idx] = u[idx] + alpha * (
                terms.grad_u - config.c1 * v_old[:, None] * np.sign(u[idx])
            )
            lam = positive_project(
                lam + config.c2 * alpha * (float((terms.losses - v_old) @ h) - t)
            )
            lam = min(lam, config.lambda_ceiling)
            if lam > LAMBDA_DIVERGENCE_CEILING:
                raise DivergenceError("lambda diverged", component="lambda")
        else:
            u[idx] = u[idx] + alpha * terms.grad_u
        if project_u:
            u[idx] = ball_project(u[idx], budget)
        _check_finite(u[idx], "u")
        losses_sum += float(terms.losses.sum())
        losses_n += len(idx)

    report = EpochReport(
        epoch=k,
        alpha=alpha,
        lam=lam,
        t=t,
        mean_loss=losses_sum / losses_n,
        frac_u_within_budget=float((budget.value(u) <= 0.0).mean()),
        mean_u_delta_l2=float(np.linalg.norm(u - u_prev, axis=1).mean()),
    )
    new_state = SaddleIterate(
        x=DecisionState(w, t),
        duals=DualState(lam, v),
        u=UncertaintyState(u),
        k=k,
    )
    return new_state, report


def minibatch_ssds_epoch(problem, state, dataset, batch_size,
                         config: SsdsConfig, rng):
    """One epoch of mini-batch saddle-point training: per-batch w, v, u,
    lambda updates; per-epoch t update and step decay."""
    return _epoch(problem, state, dataset, batch_size, config, rng,
                  use_multipliers=True, project_u=False)


def minibatch_sgda_epoch(problem, state, dataset, batch_size,
                         config: SsdsConfig, rng):
    """One epoch of plain descent-ascent: w descends the summed batch loss,
    u ascends its gradient; no epigraph variable or multipliers."""
    return _epoch(problem, state, dataset, batch_size, config, rng,
                  use_multipliers=False, project_u=False)


def minibatch_ssds_p_epoch(problem, state, dataset, batch_size,
                           config: SsdsConfig, rng):
    """Saddle-point epoch with the perturbations projected onto the budget
    ball after every batch, so the budget holds exactly throughout."""
    return _epoch(problem, state, dataset, batch_size, config, rng,
                  use_multipliers=True, project_u=True)


def _attack_loop(problem, w_star, idx, config, steps, *, use_multiplier,
                 on_step=None):
    w_star = np.asarray(w_star, dtype=np.float64)
    idx = np.asarray(idx)
    u = np.zeros((len(idx), problem.dim_u))
    v = np.full(len(idx), config.v0)
    alpha = config.eta
    budget = problem.budget
    for k in range(1, steps + 1):
        terms = problem.batch_terms(w_star, u, idx)
        _check_finite(terms.grad_u, "u")
        if use_multiplier:
            h = budget.value(u)
            v_old = v
            v = np.maximum(v + alpha * h, 0.0)
            u = u + alpha * (terms.grad_u
                             - config.c1 * v_old[:, None] * np.sign(u))
        else:
            u = u + alpha * terms.grad_u
        _check_finite(u, "u")
        alpha *= math.exp(-k * config.decay_p)
        if on_step is not None:
            on_step(k, u)
    return UncertaintyState(u)


def ssds_attack(problem, w_star, samples, config: SsdsConfig,
                steps: int, on_step=None) -> UncertaintyState:
    """Attack against frozen parameters using the perturbation and budget
    multiplier updates only (model parameters and epigraph multiplier fixed).
    `samples` is a sequence of 0-based sample positions; on_step, if given,
    is called with (step, u) after every update."""
    return _attack_loop(problem, w_star, samples, config, steps,
                        use_multiplier=True, on_step=on_step)


def sgda_attack(problem, w_star, samples, config: SsdsConfig,
                steps: int, on_step=None) -> UncertaintyState:
    """Plain gradient-ascent attack with decaying step size."""
    return _attack_loop(problem, w_star, samples, config, steps,
                        use_multiplier=False, on_step=on_step)
