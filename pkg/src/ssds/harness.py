"""Run orchestration: problem construction, training loops with CSV logging,
manifests, and reproduction."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import save_checkpoint
from .core import (
    BudgetConstraint,
    DecisionState,
    DualState,
    SaddleIterate,
    SsdsConfig,
    UncertaintyState,
)
from .dynamics import (
    EpochReport,
    minibatch_sgda_epoch,
    minibatch_ssds_epoch,
    minibatch_ssds_p_epoch,
)
from .problems import (
    Dataset,
    MlpProblem,
    QuadraticSaddleProblem,
    RobustLogisticProblem,
    load_idx_dataset,
    make_synthetic_dataset,
)

__all__ = [
    "RunManifest",
    "ALGORITHMS",
    "format_real",
    "build_problem",
    "initial_state",
    "run_training",
    "reproduce_run",
    "trajectory_csv_text",
]

ALGORITHMS = {
    "ssds": minibatch_ssds_epoch,
    "sgda": minibatch_sgda_epoch,
    "ssds-p": minibatch_ssds_p_epoch,
}

TRAJECTORY_HEADER = "epoch,alpha,lambda,t,mean_loss,frac_u_within_budget,mean_u_delta_l2"


def format_real(x: float) -> str:
    """Decimal rendering that round-trips 64-bit floats."""
    return format(float(x), ".17g")


@dataclass
class RunManifest:
    """Record of one training run; re-running it reproduces the CSV logs."""

    run_id: str
    algo: str
    problem: str
    config: dict
    dataset: dict
    epochs: int
    batch_size: int
    seed: int
    version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    final_report: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)

    def save(self, path):
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def _run_id(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def allocate_run_dir(base, run_id):
    """Directory named by run id; existing runs are never overwritten."""
    base = Path(base)
    candidate = base / run_id
    suffix = 0
    while candidate.exists():
        suffix += 1
        candidate = base / f"{run_id}-{suffix}"
    candidate.mkdir(parents=True)
    return candidate


def build_problem(name, config: SsdsConfig, data_paths=None, limit=None):
    """Concrete problem instance plus a serializable dataset descriptor."""
    budget = config.budget(math.inf)
    if name == "quadratic":
        dataset = make_synthetic_dataset(4, 2, 2, 1.0, seed=config.seed)
        c = np.array([0.05, -0.05])
        descriptor = {"kind": "synthetic-quadratic", "num_samples": 4,
                      "dim": 2, "seed": config.seed}
        return QuadraticSaddleProblem(dataset, budget, c=c), descriptor
    if name == "logistic":
        dataset = make_synthetic_dataset(500, 2, 2, 2.0, seed=config.seed)
        descriptor = {"kind": "synthetic-blobs", "num_samples": 500, "dim": 2,
                      "num_classes": 2, "seed": config.seed}
        return RobustLogisticProblem(dataset, budget), descriptor
    if name == "mlp":
        if data_paths:
            images, labels = data_paths
            dataset = load_idx_dataset(images, labels, limit=limit)
            descriptor = {"kind": "idx", "images": str(images),
                          "labels": str(labels), "limit": limit,
                          "num_samples": len(dataset)}
            hidden = (128, 64)
        else:
            dataset = make_synthetic_dataset(256, 16, 4, 2.0, seed=config.seed)
            descriptor = {"kind": "synthetic-blobs", "num_samples": 256,
                          "dim": 16, "num_classes": 4, "seed": config.seed}
            hidden = (32,)
        problem = MlpProblem(dataset, budget, hidden_sizes=hidden,
                             seed=config.seed)
        return problem, descriptor
    raise ValueError(f"unknown problem {name!r}")


def initial_state(problem, config: SsdsConfig) -> SaddleIterate:
    n = len(problem.dataset)
    w0 = (problem.initial_w() if isinstance(problem, MlpProblem)
          else np.zeros(problem.dim_w))
    return SaddleIterate(
        x=DecisionState(w0, config.t0),
        duals=DualState(config.lambda0, np.full(n, config.v0)),
        u=UncertaintyState(np.zeros((n, problem.dim_u))),
    )


def trajectory_csv_text(reports) -> str:
    lines = [TRAJECTORY_HEADER]
    for r in reports:
        lines.append(",".join([
            str(r.epoch),
            format_real(r.alpha),
            format_real(r.lam),
            format_real(r.t),
            format_real(r.mean_loss),
            format_real(r.frac_u_within_budget),
            format_real(r.mean_u_delta_l2),
        ]))
    return "\n".join(lines) + "\n"


def _u_hist_csv(state):
    lines = ["sample_id,linf_norm"]
    norms = np.abs(state.u.u).max(axis=1)
    for i, norm in enumerate(norms, start=1):
        lines.append(f"{i},{format_real(norm)}")
    return "\n".join(lines) + "\n"


def run_training(algo, problem_name, config: SsdsConfig, epochs, batch_size,
                 out_base, data_paths=None, limit=None, hist_every=30,
                 run_id=None):
    """Train, log one CSV row per epoch, snapshot u-norms every hist_every
    epochs, and write checkpoint, final state, and manifest into a fresh run
    directory.  Returns the manifest."""
    if algo not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algo!r}")
    epoch_fn = ALGORITHMS[algo]
    problem, descriptor = build_problem(problem_name, config,
                                        data_paths=data_paths, limit=limit)
    config_dict = dataclasses.asdict(config)
    if run_id is None:
        run_id = _run_id({"algo": algo, "problem": problem_name,
                          "config": config_dict, "dataset": descriptor,
                          "epochs": epochs, "batch_size": batch_size})
    run_dir = allocate_run_dir(out_base, run_id)
    manifest = RunManifest(
        run_id=run_id, algo=algo, problem=problem_name, config=config_dict,
        dataset=descriptor, epochs=epochs, batch_size=batch_size,
        seed=config.seed,
        started_at=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    )
    rng = np.random.default_rng(config.seed)
    state = initial_state(problem, config)
    reports = []
    artifacts = []
    for epoch in range(1, epochs + 1):
        state, report = epoch_fn(problem, state, problem.dataset, batch_size,
                                 config, rng)
        reports.append(report)
        if hist_every and epoch % hist_every == 0:
            name = f"u_hist_epoch_{epoch}.csv"
            (run_dir / name).write_text(_u_hist_csv(state))
            artifacts.append(name)

    (run_dir / "trajectory.csv").write_text(trajectory_csv_text(reports))
    artifacts.insert(0, "trajectory.csv")
    if isinstance(problem, MlpProblem):
        problem.model.unflatten(state.x.w)
        save_checkpoint(problem.model, run_dir / "model.ckpt")
        artifacts.append("model.ckpt")
    np.savez(run_dir / "state.npz", w=state.x.w, t=state.x.t,
             lam=state.duals.lam, v=state.duals.v, u=state.u.u)
    artifacts.append("state.npz")

    manifest.finished_at = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    manifest.final_report = asdict(reports[-1]) if reports else {}
    manifest.artifacts = artifacts
    manifest.save(run_dir / "manifest.json")
    manifest.run_dir = run_dir
    return manifest


def train_natural(problem, lr, epochs, batch_size, rng):
    """Plain unperturbed mini-batch training; returns the parameter vector."""
    n = len(problem.dataset)
    w = (problem.initial_w() if isinstance(problem, MlpProblem)
         else np.zeros(problem.dim_w))
    zero_u = np.zeros((batch_size, problem.dim_u))
    for _ in range(epochs):
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            terms = problem.batch_terms(w, zero_u[: len(idx)], idx)
            w = w - lr * terms.grad_w_sum
    return w


def reproduce_run(manifest_path, out_base):
    """Re-run a manifest into a fresh directory; returns (new manifest,
    whether the trajectory CSVs are byte-identical)."""
    old = RunManifest.load(manifest_path)
    config = SsdsConfig(**old.config)
    data_paths = None
    limit = None
    if old.dataset.get("kind") == "idx":
        data_paths = (old.dataset["images"], old.dataset["labels"])
        limit = old.dataset.get("limit")
    new = run_training(old.algo, old.problem, config, old.epochs,
                       old.batch_size, out_base, data_paths=data_paths,
                       limit=limit, run_id=old.run_id)
    old_csv = (Path(manifest_path).parent / "trajectory.csv").read_bytes()
    new_csv = (new.run_dir / "trajectory.csv").read_bytes()
    return new, old_csv == new_csv
