"""Command-line harness: train / attack / diagnose / reproduce.

Exit codes: 0 success, 1 diagnostic failure, 2 usage, 3 I/O or format error,
4 divergence.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError, load_checkpoint
from .baselines import AttackKind, AttackSpec, evaluate_under_attack
from .core import ConfigError, DivergenceError, SsdsConfig
from .diagnostics import kkt_residual, saddle_inequality_check
from .dynamics import sgda_attack, ssds_attack
from .harness import (
    allocate_run_dir,
    build_problem,
    format_real,
    initial_state,
    reproduce_run,
    run_training,
    train_natural,
)
from .problems import (
    IdxFormatError,
    MlpProblem,
    load_idx_dataset,
    saddle_oracle,
)

EXIT_OK = 0
EXIT_DIAGNOSTIC = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4


def _load_config(args):
    config = (SsdsConfig.from_file(args.config) if args.config
              else SsdsConfig())
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epsilon", None) is not None:
        overrides["epsilon"] = args.epsilon
    return config.with_overrides(**overrides) if overrides else config


def _data_paths(args):
    if args.images and args.labels:
        return (args.images, args.labels)
    if args.images or args.labels:
        raise ConfigError("--images and --labels must be given together")
    return None


def cmd_train(args):
    config = _load_config(args)
    manifest = run_training(
        args.algo, args.problem, config, args.epochs, args.batch_size,
        args.out, data_paths=_data_paths(args), limit=args.limit,
        hist_every=args.hist_every,
    )
    print(f"run {manifest.run_id}: {args.algo} on {args.problem}, "
          f"{args.epochs} epochs -> {manifest.run_dir}")
    print(f"final lambda={manifest.final_report.get('lam')} "
          f"mean_loss={manifest.final_report.get('mean_loss')}")
    return EXIT_OK


def _attacked_model(args, config):
    """(problem, w, model_id) for the attack/diagnose targets."""
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        data_paths = _data_paths(args)
        if data_paths:
            dataset = load_idx_dataset(*data_paths, limit=args.limit)
        else:
            from .problems import make_synthetic_dataset
            dataset = make_synthetic_dataset(
                256, model.layer_sizes[0],
                model.layer_sizes[-1], 2.0, seed=config.seed)
        problem = MlpProblem(dataset, config.budget(math.inf),
                             hidden_sizes=tuple(model.layer_sizes[1:-1]),
                             seed=config.seed)
        problem.model = model
        return problem, model.flatten(), Path(args.checkpoint).stem
    # natural logistic model trained on the synthetic blobs
    problem, _ = build_problem("logistic", config)
    rng = np.random.default_rng(config.seed)
    w = train_natural(problem, lr=0.05, epochs=200, batch_size=50, rng=rng)
    return problem, w, "natural-logistic"


def cmd_attack(args):
    config = _load_config(args)
    problem, w, model_id = _attacked_model(args, config)
    eps = config.epsilon
    rng = np.random.default_rng(config.seed)
    clean = evaluate_under_attack(problem, w, None, None)
    if args.kind == "fgsm":
        spec = AttackSpec(AttackKind.FGSM, eps)
        acc = evaluate_under_attack(problem, w, None, spec)
        params = f"eps={eps}"
    elif args.kind == "pgd":
        spec = AttackSpec(AttackKind.PGD, eps, step_eta=args.eta,
                          steps=args.steps,
                          random_start=not args.no_random_start)
        acc = evaluate_under_attack(problem, w, None, spec, rng=rng)
        params = f"eps={eps};eta={args.eta};steps={args.steps}"
    else:
        attack_fn = ssds_attack if args.kind == "ssds" else sgda_attack
        idx = np.arange(len(problem.dataset))
        u = attack_fn(problem, w, idx, config, args.steps)
        acc = problem.accuracy(w, perturbation=u.u)
        params = f"eps={eps};steps={args.steps}"
    out_dir = allocate_run_dir(args.out, f"attack-{args.kind}-{model_id}")
    rows = ["model_id,attack,params,accuracy",
            f"{model_id},clean,,{format_real(clean)}",
            f"{model_id},{args.kind},{params},{format_real(acc)}"]
    (out_dir / "attack_eval.csv").write_text("\n".join(rows) + "\n")
    print(f"clean accuracy {clean:.4f}; {args.kind} accuracy {acc:.4f} "
          f"-> {out_dir}")
    return EXIT_OK


def cmd_diagnose(args):
    config = _load_config(args)
    rng = np.random.default_rng(config.seed)
    if args.analytic:
        problem, _ = build_problem("quadratic", config)
        z = saddle_oracle(problem)
        threshold = 1e-9
    else:
        if not args.checkpoint:
            raise ConfigError("diagnose needs --analytic or --checkpoint")
        problem, w, _ = _attacked_model(args, config)
        z = initial_state(problem, config.with_overrides(lambda0=1.0, v0=0.0))
        z.x.w = np.asarray(w)
        threshold = None
    residual = kkt_residual(problem, z)
    violations, max_violation = saddle_inequality_check(
        problem, z, probes=args.probes, rng=rng, radius=args.radius)
    report = residual.to_json(saddle_violations=violations,
                              max_saddle_violation=max_violation)
    out_dir = allocate_run_dir(args.out, "diagnose")
    (out_dir / "kkt_report.json").write_text(report + "\n")
    print(report)
    if threshold is not None and (residual.max_residual() > threshold
                                  or violations > 0):
        print("diagnostic FAIL: residuals exceed threshold", file=sys.stderr)
        return EXIT_DIAGNOSTIC
    return EXIT_OK


def _figure_u_hist(args, config):
    manifest = run_training("ssds", "logistic", config, 90, 50, args.out,
                            hist_every=30)
    print(f"u-norm snapshots every 30 epochs in {manifest.run_dir}")
    return EXIT_OK


def _figure_u_evolution(args, config):
    manifest = run_training("ssds", "logistic", config, 120, 50, args.out,
                            hist_every=0)
    print(f"per-epoch perturbation-drift column in "
          f"{manifest.run_dir}/trajectory.csv")
    return EXIT_OK


def _figure_sgda_vs_ssds(args, config):
    m_ssds = run_training("ssds", "logistic", config, 100, 50, args.out,
                          hist_every=0)
    m_sgda = run_training("sgda", "logistic", config, 100, 50, args.out,
                          hist_every=0)
    out_dir = allocate_run_dir(args.out, "sgda-vs-ssds")
    ssds_rows = (m_ssds.run_dir / "trajectory.csv").read_text().splitlines()[1:]
    sgda_rows = (m_sgda.run_dir / "trajectory.csv").read_text().splitlines()[1:]
    lines = ["epoch,ssds_mean_loss,sgda_mean_loss"]
    for a, b in zip(ssds_rows, sgda_rows):
        a, b = a.split(","), b.split(",")
        lines.append(f"{a[0]},{a[4]},{b[4]}")
    (out_dir / "loss_curves.csv").write_text("\n".join(lines) + "\n")
    print(f"paired loss curves -> {out_dir}/loss_curves.csv")
    return EXIT_OK


def _figure_robust_table(args, config):
    problem, _ = build_problem("mlp", config)
    rng = np.random.default_rng(config.seed)
    w_nat = train_natural(problem, lr=0.01, epochs=30, batch_size=32, rng=rng)
    manifest = run_training("ssds-p", "mlp", config, 30, 32, args.out,
                            hist_every=0)
    state = np.load(Path(manifest.run_dir) / "state.npz")
    w_rob = state["w"]
    eps = config.epsilon
    rows = ["model_id,attack,params,accuracy"]
    for model_id, w in (("natural", w_nat), ("robust", w_rob)):
        evals = [("clean", None, "")]
        evals.append(("fgsm", AttackSpec(AttackKind.FGSM, eps), f"eps={eps}"))
        evals.append(("pgd", AttackSpec(AttackKind.PGD, eps, step_eta=eps / 4,
                                        steps=20), f"eps={eps};steps=20"))
        for name, spec, params in evals:
            acc = evaluate_under_attack(problem, w, None, spec,
                                        rng=np.random.default_rng(config.seed))
            rows.append(f"{model_id},{name},{params},{format_real(acc)}")
        idx = np.arange(len(problem.dataset))
        for name, fn in (("sgda-attack", sgda_attack),
                         ("ssds-attack", ssds_attack)):
            u = fn(problem, w, idx, config, 50)
            acc = problem.accuracy(w, perturbation=u.u)
            rows.append(f"{model_id},{name},eps={eps};steps=50,"
                        f"{format_real(acc)}")
    out_dir = allocate_run_dir(args.out, "robust-table")
    (out_dir / "robust_table.csv").write_text("\n".join(rows) + "\n")
    print(f"accuracy table -> {out_dir}/robust_table.csv")
    return EXIT_OK


def cmd_reproduce(args):
    config = _load_config(args)
    if args.manifest:
        new, identical = reproduce_run(args.manifest, args.out)
        if identical:
            print(f"reproduced {new.run_id}: trajectory CSV byte-identical")
            return EXIT_OK
        print(f"reproduced {new.run_id}: trajectory CSV DIFFERS",
              file=sys.stderr)
        return EXIT_DIAGNOSTIC
    figures = {
        "u-hist": _figure_u_hist,
        "u-evolution": _figure_u_evolution,
        "sgda-vs-ssds": _figure_sgda_vs_ssds,
        "robust-table": _figure_robust_table,
    }
    return figures[args.figure](args, config)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ssds",
        description="Saddle-point dynamics for robust min-max training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--out", default="runs")
        p.add_argument("--images", default=None)
        p.add_argument("--labels", default=None)
        p.add_argument("--limit", type=int, default=None)

    p = sub.add_parser("train", help="run a training loop")
    p.add_argument("--algo", required=True, choices=sorted(("ssds", "sgda",
                                                            "ssds-p")))
    p.add_argument("--problem", required=True,
                   choices=("quadratic", "logistic", "mlp"))
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--hist-every", type=int, default=30)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="evaluate a model under attack")
    p.add_argument("--kind", required=True,
                   choices=("ssds", "sgda", "fgsm", "pgd"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.007)
    p.add_argument("--no-random-start", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("diagnose", help="first-order optimality report")
    p.add_argument("--analytic", choices=("quadratic",), default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--probes", type=int, default=1000)
    p.add_argument("--radius", type=float, default=0.1)
    common(p)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("reproduce", help="re-run a manifest or a scripted "
                                         "experiment")
    p.add_argument("--manifest", default=None)
    p.add_argument("--figure", choices=("u-hist", "u-evolution",
                                        "sgda-vs-ssds", "robust-table"),
                   default=None)
    common(p)
    p.set_defaults(fn=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0,) else 0
    if args.command == "reproduce" and not (args.manifest or args.figure):
        print("reproduce needs --manifest or --figure", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CheckpointError, IdxFormatError, FileNotFoundError,
            json.JSONDecodeError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
