"""Optimality diagnostics: Lagrangian value, KKT residuals, local saddle
inequality probing, and budget-satisfaction statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import BudgetConstraint, SaddleIterate, UncertaintyState
from .problems import RobustProblem

__all__ = [
    "KktResidual",
    "lagrangian_value",
    "kkt_residual",
    "saddle_inequality_check",
    "budget_histogram",
    "BudgetHistogram",
]


@dataclass(frozen=True)
class KktResidual:
    """Residuals of the first-order optimality system; all zero at a saddle."""

    stationarity_x: float
    stationarity_u: float
    comp_slack_lambda: float
    comp_slack_v: float
    primal_feas: float
    dual_feas: float

    def max_residual(self):
        return max(asdict(self).values())

    def to_json(self, **extra):
        return json.dumps({**asdict(self), **extra}, indent=2, sort_keys=True)


def _full_terms(problem, z):
    idx = np.arange(len(problem.dataset))
    return problem.batch_terms(z.x.w, z.u.u, idx)


def lagrangian_value(problem: RobustProblem, z: SaddleIterate) -> float:
    """t + lambda * (sum_i (L_i - v^i h^i(u^i)) - t)."""
    terms = _full_terms(problem, z)
    h = problem.budget.value(z.u.u)
    bracket = float(terms.losses.sum()) - float(z.duals.v @ h) - z.x.t
    return z.x.t + z.duals.lam * bracket


def kkt_residual(problem: RobustProblem, z: SaddleIterate) -> KktResidual:
    """First-order residuals at z, using the problem's gradient oracles.

    Stationarity in x covers both the parameter block (lambda sum_i grad_w L_i)
    and the epigraph slot (1 - lambda); stationarity in u is the worst
    per-sample norm of grad_u L_i - v^i (subgradient of h).
    """
    terms = _full_terms(problem, z)
    lam, v = z.duals.lam, z.duals.v
    u = z.u.u
    h = problem.budget.value(u)
    g = float(terms.losses.sum()) - z.x.t

    grad_x = np.concatenate([lam * terms.grad_w_sum, [1.0 - lam]])
    sub = np.stack([problem.constraint_subgrad(row) for row in u])
    grad_u = terms.grad_u - v[:, None] * sub

    return KktResidual(
        stationarity_x=float(np.linalg.norm(grad_x)),
        stationarity_u=float(np.linalg.norm(grad_u, axis=1).max()),
        comp_slack_lambda=abs(lam * (g - float(v @ h))),
        comp_slack_v=float(np.abs(v * h).max()),
        primal_feas=max(0.0, g, float(h.max())),
        dual_feas=max(0.0, -lam, float(np.maximum(-v, 0.0).max(initial=0.0))),
    )


def saddle_inequality_check(problem: RobustProblem, z: SaddleIterate,
                            probes: int, rng, radius: float = 0.1,
                            tol: float = 1e-7):
    """Probe the two-sided saddle inequality locally around z.

    Draws `probes` random (lambda, u) perturbations — the ascent side must not
    beat the candidate value — and `probes` random (x, v) perturbations — the
    descent side must not undercut it.  Multiplier probes are clipped at zero.
    Returns (violation count, max violation).
    """
    if probes == 0:
        return 0, 0.0
    base = lagrangian_value(problem, z)
    violations, max_violation = 0, 0.0
    n, m = z.u.u.shape
    for _ in range(probes):
        zp = z.copy()
        zp.duals.lam = max(z.duals.lam + rng.uniform(-radius, radius), 0.0)
        zp.u.u += rng.uniform(-radius, radius, size=(n, m))
        gap = lagrangian_value(problem, zp) - base
        if gap > tol:
            violations += 1
            max_violation = max(max_violation, gap)
    for _ in range(probes):
        zp = z.copy()
        zp.x.w += rng.uniform(-radius, radius, size=z.x.w.shape)
        zp.x.t += rng.uniform(-radius, radius)
        zp.duals.v = np.maximum(
            z.duals.v + rng.uniform(-radius, radius, size=n), 0.0
        )
        gap = base - lagrangian_value(problem, zp)
        if gap > tol:
            violations += 1
            max_violation = max(max_violation, gap)
    return violations, max_violation


@dataclass(frozen=True)
class BudgetHistogram:
    """Histogram of per-sample sup-norms with the within-budget fraction."""

    edges: np.ndarray
    counts: np.ndarray
    frac_within_budget: float

    def to_csv_rows(self):
        rows = ["bin_left,bin_right,count"]
        for left, right, count in zip(self.edges[:-1], self.edges[1:],
                                      self.counts):
            rows.append(f"{left:.17g},{right:.17g},{int(count)}")
        return "\n".join(rows) + "\n"


def budget_histogram(u: UncertaintyState, budget: BudgetConstraint,
                     bins: int) -> BudgetHistogram:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    norms = np.abs(u.u).max(axis=1)
    top = float(norms.max())
    counts, edges = np.histogram(norms, bins=bins,
                                 range=(0.0, top if top > 0 else 1.0))
    return BudgetHistogram(
        edges=edges,
        counts=counts,
        frac_within_budget=float((norms <= budget.epsilon).mean()),
    )
