"""Command-line entry point.

Verbs: train (one run), sweep (grid + selection), dfiv (two-stage IV runs),
verify (theory battery), gen-data (dataset bundles). Every config-file key
can be overridden by a flag; outputs are CSVs plus a summary JSON, with PNG
figures rendered alongside unless --no-plots is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import backbone as bk
from . import dfiv as dfiv_mod
from . import harness, optim
from .datasets import gen_classification_task, gen_regression_task, save_task_bundle
from .head import save_head
from .records import write_run_csv


def _add_train_flags(p):
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--task", choices=["synth_regression", "synth_classification"])
    p.add_argument("--method", choices=list(optim.METHODS))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--momentum", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--hidden", help="hidden layer sizes, e.g. 32x32")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")


def _spec_from_args(args, seeds):
    overrides = {
        "task": {"name": args.task,
                 "seed": getattr(args, "data_seed", None)},
        "train": {k: getattr(args, k, None) for k in
                  ("method", "batch_size", "lam", "beta", "epochs", "momentum",
                   "optimizer", "max_iters")},
        "sweep": {},
        "run": {"out": args.out, "seeds": seeds},
    }
    overrides["train"]["learning_rate"] = args.lr
    if getattr(args, "hidden", None):
        overrides["train"]["hidden_dims"] = tuple(int(v) for v in args.hidden.split("x"))
    if getattr(args, "jobs", None):
        overrides["run"]["jobs"] = args.jobs
    if getattr(args, "no_plots", False):
        overrides["run"]["plots"] = False
    return harness.load_spec(args.config, overrides)


def cmd_train(args) -> int:
    spec = _spec_from_args(args, seeds=[args.seed] if args.seed is not None else None)
    task = harness.make_task(spec)
    cfg = replace(spec.train, seed=spec.seeds[0])
    os.makedirs(spec.out_dir, exist_ok=True)
    result = optim.train(task, cfg)
    csv_path = os.path.join(spec.out_dir, "run.csv")
    write_run_csv(result.records, csv_path)
    bk.save_backbone(result.backbone, os.path.join(spec.out_dir, "backbone.bin"))
    save_head(result.head, os.path.join(spec.out_dir, "head.bin"))
    test_metric = optim.evaluate(result.backbone, result.head, task.test, task.kind)
    summary = {"schema_version": harness.SCHEMA_VERSION,
               "final_train_loss": result.records[-1].train_loss,
               "final_val_metric": result.records[-1].eval_metric,
               "test_metric": test_metric,
               "iterations": len(result.records),
               "wall_ms": result.wall_ms_total}
    with open(os.path.join(spec.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if spec.plots:
        from . import plotting
        kind = "accuracy" if task.kind == "classification" else "mse"
        plotting.plot_run_csv(csv_path, metric_kind=kind)
    print(f"final train loss {summary['final_train_loss']:.6g}, "
          f"test metric {test_metric:.6g} -> {spec.out_dir}")
    return 0


def cmd_sweep(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    spec = _spec_from_args(args, seeds=seeds)
    summary = harness.run_experiment(spec)
    print(f"best cell {summary['best_cell']}: "
          f"val {summary['best_mean_final_val_metric']:.6g}, "
          f"test {summary['best_mean_test_metric']:.6g} -> {spec.out_dir}")
    return 0


def cmd_dfiv(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    os.makedirs(args.out, exist_ok=True)
    rows = []
    naive_scores = []
    for seed in seeds:
        data = dfiv_mod.generate_iv_data(n1=args.n1, n2=args.n2, n_test=args.n_test,
                                         confound=args.confound, noise=args.noise,
                                         seed=seed)
        cfg = dfiv_mod.DfivConfig(
            outer_iters=args.outer_iters, t1=args.t1, t2=args.t2,
            b1=args.b1, b2=args.b2, head_mode=args.mode,
            lam1=args.lambda1, lam2=args.lambda2, lam12=args.lambda12,
            beta1=args.beta1, beta2=args.beta2,
            learning_rate=args.lr, momentum=args.momentum, seed=seed)
        state, records = dfiv_mod.dfiv_train(cfg, data)
        csv_path = os.path.join(args.out, f"dfiv_seed{seed}.csv")
        write_run_csv(records, csv_path)
        row = {"seed": seed, "csv": os.path.basename(csv_path),
               "current_mse": dfiv_mod.dfiv_evaluate(state, data, "current"),
               "reestimate_mse": dfiv_mod.dfiv_evaluate(state, data, "reestimate")}
        if args.baseline:
            naive = min(dfiv_mod.naive_regression_baseline(
                data, learning_rate=lr, lam=10.0, seed=seed)
                for lr in (0.05, 0.01, 0.003))
            row["naive_mse"] = naive
            naive_scores.append(naive)
        rows.append(row)
    summary = {
        "schema_version": harness.SCHEMA_VERSION,
        "mode": args.mode,
        "seeds": rows,
        "current_mse_mean": float(np.mean([r["current_mse"] for r in rows])),
        "reestimate_mse_mean": float(np.mean([r["reestimate_mse"] for r in rows])),
        "naive_mse_mean": float(np.mean(naive_scores)) if naive_scores else None,
    }
    with open(os.path.join(args.out, "dfiv_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not args.no_plots:
        from . import plotting
        plotting.plot_dfiv_summary(args.out, summary)
    print(f"current MSE {summary['current_mse_mean']:.4g}, "
          f"reestimate {summary['reestimate_mse_mean']:.4g}"
          + (f", naive baseline {summary['naive_mse_mean']:.4g}" if naive_scores else "")
          + f" -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    battery = {}
    if args.checks:
        battery["checks"] = [c for c in args.checks.split(",") if c]
    if args.fault_injection:
        battery["fault_injection"] = True
    if args.quick:
        battery.setdefault("flow_steps", 20000)
        battery.setdefault("flow_seeds", [0])
        battery.setdefault("n_networks", 2)
        battery.setdefault("n_instances", 4)
    report = harness.run_theory_suite(battery, out_dir=args.out)
    for check in report["checks"]:
        mark = "PASS" if check["passed"] else "FAIL"
        print(f"[{mark}] {check['name']}: measured {check['measured']:.3e} "
              f"(threshold {check['threshold']:.3e})")
    if "warning" in report:
        print(f"warning: {report['warning']}")
    if args.out and not args.no_plots:
        from . import plotting
        for name in sorted(os.listdir(args.out)):
            if name.startswith("flow_") and name.endswith(".csv"):
                plotting.plot_trajectory_csv(os.path.join(args.out, name))
    print("verdict:", "PASS" if report["passed"] else "FAIL")
    return 0 if report["passed"] else 1


def cmd_gen_data(args) -> int:
    if args.task == "iv":
        data = dfiv_mod.generate_iv_data(n1=args.n1, n2=args.n2, n_test=args.n_test,
                                         confound=args.confound, noise=args.noise,
                                         seed=args.seed)
        dfiv_mod.save_iv_bundle(data, args.out)
    elif args.task == "synth_regression":
        task = gen_regression_task(n=args.n, seed=args.seed)
        save_task_bundle(task, args.out)
    else:
        task = gen_classification_task(n=args.n, seed=args.seed)
        save_task_bundle(task, args.out)
    print(f"wrote {args.task} bundle -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lastlayer",
        description="Train networks with a closed-form last layer and verify the theory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    _add_train_flags(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a hyperparameter sweep with selection")
    _add_train_flags(p)
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dfiv", help="two-stage instrumental-variable training")
    p.add_argument("--mode", choices=["proximal", "ridge"], default="proximal")
    p.add_argument("--outer-iters", type=int, default=250)
    p.add_argument("--t1", type=int, default=20)
    p.add_argument("--t2", type=int, default=1)
    p.add_argument("--b1", type=int, default=256)
    p.add_argument("--b2", type=int, default=256)
    p.add_argument("--lambda1", type=float, default=30.0)
    p.add_argument("--lambda2", type=float, default=30.0)
    p.add_argument("--lambda12", type=float, default=1e-4)
    p.add_argument("--beta1", type=float, default=0.1)
    p.add_argument("--beta2", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--n1", type=int, default=2000)
    p.add_argument("--n2", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=1000, dest="n_test")
    p.add_argument("--confound", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--baseline", action="store_true",
                   help="also score the naive confounded regression")
    p.add_argument("--out", default="runs/dfiv")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_dfiv)

    p = sub.add_parser("verify", help="run the theory verification battery")
    p.add_argument("--out", default="runs/verify")
    p.add_argument("--checks", help="comma-separated subset of checks")
    p.add_argument("--fault-injection", action="store_true",
                   help="negative control: corrupt the analytic gradient")
    p.add_argument("--quick", action="store_true", help="smaller, faster battery")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write a dataset bundle to disk")
    p.add_argument("--task", choices=["synth_regression", "synth_classification", "iv"],
                   required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--n1", type=int, default=2000)
    p.add_argument("--n2", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=1000, dest="n_test")
    p.add_argument("--confound", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
