"""Experiment orchestration: configs, sweeps, persistence, and the theory battery.

Sweeps expand a grid over learning rate, the method-specific regularization
coefficient, and batch size; every (cell, seed) run writes one RunRecord CSV,
and a summary JSON records per-cell means, the selected cell (best mean final
validation metric), and its test metric. Reruns of the same spec are
byte-identical on the CSV side.

The theory battery aggregates the checks from the theory module into a
machine-readable pass/fail report; a deliberately injected gradient fault
must turn the report red, which keeps the battery falsifiable.
"""

from __future__ import annotations

import configparser
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as bk
from . import head as hd
from . import losses, optim, theory
from .datasets import TaskData, gen_classification_task, gen_regression_task
from .errors import ConfigurationError, DivergenceError
from .records import RunRecord, write_run_csv

SCHEMA_VERSION = 1

TASKS = ("synth_regression", "synth_classification", "dfiv", "theory_suite")


@dataclass
class ExperimentSpec:
    task: str = "synth_regression"
    task_params: dict = field(default_factory=dict)
    train: optim.TrainConfig = field(default_factory=optim.TrainConfig)
    sweep: dict = field(default_factory=dict)   # axes: lr, lambda, beta, batch_size
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/experiment"
    jobs: int = 1
    plots: bool = True

    def validate(self) -> "ExperimentSpec":
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not self.seeds:
            raise ConfigurationError("need at least one seed")
        for axis, values in self.sweep.items():
            if axis not in ("lr", "lambda", "beta", "batch_size"):
                raise ConfigurationError(f"unknown sweep axis {axis!r}")
            if not values:
                raise ConfigurationError(f"sweep axis {axis!r} is empty")
        return self


def _parse_scalar(text):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _parse_list(text):
    return [_parse_scalar(v) for v in text.split(",") if v.strip()]


def load_spec(config_path=None, overrides=None) -> ExperimentSpec:
    """Build a spec from a flat sectioned key=value file plus CLI overrides.

    Sections: [task] (name + generator params), [train] (TrainConfig fields,
    with lr and lambda accepted as aliases), [sweep] (one comma-separated
    axis per key), [run] (seeds, out, jobs, plots). Every file key can be
    overridden from the command line.
    """
    sections = {"task": {}, "train": {}, "sweep": {}, "run": {}}
    if config_path:
        parser = configparser.ConfigParser()
        with open(config_path) as fh:
            parser.read_file(fh)
        for name in parser.sections():
            if name not in sections:
                raise ConfigurationError(f"unknown config section [{name}]")
            for key, value in parser.items(name):
                if name == "sweep":
                    sections[name][key] = _parse_list(value)
                elif name == "run" and key == "seeds":
                    sections[name][key] = _parse_list(value)
                else:
                    sections[name][key] = _parse_scalar(value)
    for section, values in (overrides or {}).items():
        sections[section].update({k: v for k, v in values.items() if v is not None})

    task_params = dict(sections["task"])
    task = task_params.pop("name", "synth_regression")

    train_kw = dict(sections["train"])
    alias = {"lr": "learning_rate", "lambda": "lam"}
    train_kw = {alias.get(k, k): v for k, v in train_kw.items()}
    if "hidden_dims" in train_kw:
        dims = train_kw["hidden_dims"]
        if isinstance(dims, str):
            dims = tuple(int(v) for v in dims.split("x"))
        elif isinstance(dims, int):
            dims = (dims,)
        train_kw["hidden_dims"] = tuple(dims)
    valid = set(optim.TrainConfig.__dataclass_fields__)
    unknown = set(train_kw) - valid
    if unknown:
        raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
    train = optim.TrainConfig(**train_kw)

    run_kw = sections["run"]
    return ExperimentSpec(
        task=task,
        task_params=task_params,
        train=train,
        sweep=dict(sections["sweep"]),
        seeds=list(run_kw.get("seeds", [0])),
        out_dir=str(run_kw.get("out", "runs/experiment")),
        jobs=int(run_kw.get("jobs", 1)),
        plots=bool(run_kw.get("plots", True)),
    ).validate()


def make_task(spec: ExperimentSpec) -> TaskData:
    params = dict(spec.task_params)
    if spec.task == "synth_regression":
        return gen_regression_task(**params)
    if spec.task == "synth_classification":
        return gen_classification_task(**params)
    raise ConfigurationError(f"task {spec.task!r} does not build a TaskData")


def _method_reg_axis(method: str):
    if method in ("closed_form_proximal_simple", "closed_form_proximal_lookahead"):
        return "lambda"
    if method in ("closed_form_ridge", "joint_sgd_l2"):
        return "beta"
    return None


def expand_cells(spec: ExperimentSpec) -> list:
    """Cartesian product over the applicable sweep axes, as config deltas."""
    lrs = spec.sweep.get("lr", [spec.train.learning_rate])
    batches = spec.sweep.get("batch_size", [spec.train.batch_size])
    reg_axis = _method_reg_axis(spec.train.method)
    if reg_axis == "lambda":
        regs = spec.sweep.get("lambda", [spec.train.lam])
    elif reg_axis == "beta":
        regs = spec.sweep.get("beta", [spec.train.beta])
    else:
        regs = [None]
    cells = []
    for batch in batches:
        for lr in lrs:
            for reg in regs:
                delta = {"learning_rate": float(lr), "batch_size": int(batch)}
                label = f"bs{batch}_lr{lr:g}"
                if reg_axis == "lambda":
                    delta["lam"] = float(reg)
                    label += f"_lam{reg:g}"
                elif reg_axis == "beta":
                    delta["beta"] = float(reg)
                    label += f"_beta{reg:g}"
                cells.append({"id": label, "delta": delta})
    return cells


def _cell_config(spec: ExperimentSpec, cell: dict, seed: int) -> optim.TrainConfig:
    return replace(spec.train, seed=seed, **cell["delta"])


def run_single(spec: ExperimentSpec, cell: dict, seed: int, out_dir) -> dict:
    """One (cell, seed) training run; writes its CSV (or a divergence record)."""
    task = make_task(spec)
    cfg = _cell_config(spec, cell, seed)
    csv_path = os.path.join(out_dir, f"{cell['id']}__seed{seed}.csv")
    try:
        result = optim.train(task, cfg)
    except DivergenceError as exc:
        diag_path = os.path.join(out_dir, f"{cell['id']}__seed{seed}.diverged.json")
        with open(diag_path, "w") as fh:
            json.dump(exc.record, fh, indent=2, sort_keys=True, default=str)
        write_run_csv(exc.result.records, csv_path)
        return {"cell": cell["id"], "seed": seed, "status": "diverged",
                "csv": os.path.basename(csv_path)}
    write_run_csv(result.records, csv_path)
    test_metric = optim.evaluate(result.backbone, result.head, task.test, task.kind)
    last = result.records[-1]
    return {"cell": cell["id"], "seed": seed, "status": "ok",
            "csv": os.path.basename(csv_path),
            "final_train_loss": last.train_loss,
            "final_val_metric": last.eval_metric,
            "final_w_delta": last.w_delta,
            "mean_w_delta": float(np.mean([r.w_delta for r in result.records])),
            "test_metric": test_metric,
            "wall_ms": result.wall_ms_total}


def _run_single_star(args):
    return run_single(*args)


def run_experiment(spec: ExperimentSpec) -> dict:
    """Execute the full sweep, select the best cell, and write summary.json."""
    spec = spec.validate()
    os.makedirs(spec.out_dir, exist_ok=True)
    cells = expand_cells(spec)
    jobs = [(spec, cell, seed, spec.out_dir) for cell in cells for seed in spec.seeds]
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(_run_single_star, jobs))
    else:
        results = [run_single(*job) for job in jobs]

    by_cell = {}
    for res in results:
        by_cell.setdefault(res["cell"], []).append(res)
    kind = "classification" if spec.task == "synth_classification" else "regression"
    higher_better = kind == "classification"
    cell_rows = []
    for cell in cells:
        rows = by_cell[cell["id"]]
        ok = [r for r in rows if r["status"] == "ok"]
        entry = {"id": cell["id"], "params": cell["delta"],
                 "n_ok": len(ok), "n_diverged": len(rows) - len(ok),
                 "runs": rows}
        if ok:
            entry["mean_final_val_metric"] = float(np.mean([r["final_val_metric"] for r in ok]))
            entry["mean_final_train_loss"] = float(np.mean([r["final_train_loss"] for r in ok]))
            entry["mean_test_metric"] = float(np.mean([r["test_metric"] for r in ok]))
            entry["mean_w_delta"] = float(np.mean([r["mean_w_delta"] for r in ok]))
        cell_rows.append(entry)

    complete = [c for c in cell_rows if c["n_ok"] == len(spec.seeds)]
    if not complete:
        raise DivergenceError("every sweep cell diverged", {"out_dir": spec.out_dir})
    best = (max if higher_better else min)(complete,
                                           key=lambda c: c["mean_final_val_metric"])
    summary = {
        "schema_version": SCHEMA_VERSION,
        "task": spec.task,
        "task_params": spec.task_params,
        "method": spec.train.method,
        "metric_kind": "accuracy" if higher_better else "mse",
        "seeds": list(spec.seeds),
        "cells": cell_rows,
        "best_cell": best["id"],
        "best_mean_final_val_metric": best["mean_final_val_metric"],
        "best_mean_test_metric": best["mean_test_metric"],
    }
    with open(os.path.join(spec.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if spec.plots:
        from . import plotting
        plotting.plot_sweep_summary(spec.out_dir)
    return summary


# ---------------------------------------------------------------------------
# theory verification battery


DEFAULT_BATTERY = {
    "checks": ["envelope_ridge", "envelope_proximal", "kalman",
               "closed_form_optimality", "critical_points", "functional_gradient",
               "flow"],
    "seed": 0,
    "n_networks": 3,
    "n_instances": 8,
    "flow_seeds": [0, 3],
    "flow_steps": 100000,
    "fault_injection": False,
}


def _battery_networks(rng, n_networks, max_params=1000):
    nets = []
    for i in range(n_networks):
        activation = "tanh" if i % 2 == 0 else "relu"
        dims = [int(rng.integers(2, 5)), int(rng.integers(4, 10)), int(rng.integers(2, 6))]
        bb = bk.init_backbone(dims, activation, "standard", seed=int(rng.integers(2**31)))
        assert bb.num_params() <= max_params
        x = rng.standard_normal((dims[0], int(rng.integers(6, 14))))
        y = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1]))
        nets.append((bb, x, y))
    return nets


def _check_envelope(battery, mode):
    rng = np.random.default_rng(battery["seed"])
    fault = 0.02 if battery.get("fault_injection") else 0.0
    worst = 0.0
    for bb, x, y in _battery_networks(rng, battery["n_networks"]):
        if mode == "ridge":
            rep = theory.check_envelope_gradient(bb, (x, y), "ridge", beta=0.3,
                                                 has_bias=True,
                                                 inject_gradient_fault=fault)
        else:
            prev = rng.standard_normal((y.shape[0], bb.feature_dim + 1))
            rep = theory.check_envelope_gradient(bb, (x, y), "proximal", lam=1.0,
                                                 prev_weights=prev, has_bias=True,
                                                 inject_gradient_fault=fault)
        worst = max(worst, rep["max_rel_err"])
    return {"name": f"envelope_{mode}", "measured": worst, "threshold": 1e-4,
            "passed": worst <= 1e-4}


def _check_kalman(battery):
    rng = np.random.default_rng(battery["seed"] + 1)
    worst = 0.0
    for _ in range(battery["n_instances"]):
        targets = rng.standard_normal((2, 10))
        features = rng.standard_normal((4, 10))
        prev = rng.standard_normal((2, 4))
        sig_y = float(10.0 ** rng.uniform(-1, 1))
        sig_w = float(10.0 ** rng.uniform(-1, 1))
        rep = theory.check_kalman_equivalence(targets, features, prev, sig_y, sig_w)
        worst = max(worst, rep["rel_err"])
    return {"name": "kalman", "measured": worst, "threshold": 1e-6,
            "passed": worst <= 1e-6}


def _check_closed_form_optimality(battery):
    rng = np.random.default_rng(battery["seed"] + 2)
    worst = 0.0
    for _ in range(battery["n_instances"]):
        o, d, n = int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(4, 16))
        targets = rng.standard_normal((o, n))
        phi = rng.standard_normal((d, n))
        beta = float(10.0 ** rng.uniform(-2, 2))
        w = hd.ridge_solution(targets, phi, beta)
        g = losses.ridge_loss(w, phi, targets, beta).grad_weights
        worst = max(worst, float(np.linalg.norm(g) / (1.0 + np.linalg.norm(targets))))
        prev = rng.standard_normal((o, d))
        wp = hd.proximal_solution(targets, phi, prev, beta)
        gp = losses.proximal_loss(wp, phi, targets, prev, beta).grad_weights
        worst = max(worst, float(np.linalg.norm(gp) / (1.0 + np.linalg.norm(targets))))
    return {"name": "closed_form_optimality", "measured": worst, "threshold": 1e-8,
            "passed": worst <= 1e-8}


def _check_critical_points(battery):
    rng = np.random.default_rng(battery["seed"] + 3)
    ok = True
    zero_phi = theory.is_critical(np.ones((2, 4)), np.zeros((3, 4)), 0.5)
    ok &= zero_phi["critical"] and not zero_phi["is_global"]
    for _ in range(battery["n_instances"]):
        targets = rng.standard_normal((2, 6))
        phi = rng.standard_normal((3, 6))
        verdict = theory.is_critical(targets, phi, 0.5)
        grad_norm = np.linalg.norm(theory.functional_gradient(targets, phi, 0.5))
        ok &= (not verdict["critical"]) and grad_norm > 1e-8
    return {"name": "critical_points", "measured": float(ok), "threshold": 1.0,
            "passed": bool(ok)}


def _check_functional_gradient(battery):
    rng = np.random.default_rng(battery["seed"] + 4)
    worst = 0.0
    for _ in range(battery["n_instances"]):
        targets = rng.standard_normal((2, 6))
        phi = rng.standard_normal((3, 6))
        beta = 0.4
        grad = theory.functional_gradient(targets, phi, beta)
        fd = np.zeros_like(phi)
        for idx in np.ndindex(phi.shape):
            h = 1e-6 * (1.0 + abs(phi[idx]))
            up = phi.copy(); up[idx] += h
            dn = phi.copy(); dn[idx] -= h
            fd[idx] = (losses.induced_loss(up, targets, beta)
                       - losses.induced_loss(dn, targets, beta)) / (2.0 * h)
        scale = max(np.max(np.abs(grad)), np.max(np.abs(fd)), 1e-12)
        worst = max(worst, float(np.max(np.abs(grad - fd)) / scale))
    return {"name": "functional_gradient", "measured": worst, "threshold": 1e-4,
            "passed": worst <= 1e-4}


def _check_flow(battery, out_dir=None):
    worst_resid = 0.0
    worst_viol = 0.0
    loss_monotone = True
    for seed in battery["flow_seeds"]:
        rng = np.random.default_rng(seed)
        phi0 = rng.standard_normal((6, 8))
        targets = rng.standard_normal((2, 8))
        kernel = theory.default_flow_kernel(6, seed=seed + 1000)
        fs = theory.FlowState(phi0, kernel, 1e-2)
        dt = 0.1 / theory.sym_eigvals(kernel)[-1]
        traj = theory.integrate_flow(fs, targets, dt, battery["flow_steps"],
                                     stop_residual_ratio=1e-3)
        worst_resid = max(worst_resid,
                          float(traj.residual_norms[-1] / np.linalg.norm(targets)))
        worst_viol = max(worst_viol, theory.check_eig_monotone(traj)["max_violation"])
        vals = traj.induced_values
        loss_monotone &= all(b <= a + 1e-8 * (1.0 + a) for a, b in zip(vals, vals[1:]))
        if out_dir:
            theory.write_trajectory_csv(
                traj, os.path.join(out_dir, f"flow_seed{seed}.csv"))
    passed = worst_resid <= 1e-3 and worst_viol == 0.0 and loss_monotone
    return {"name": "flow", "measured": worst_resid, "threshold": 1e-3,
            "eig_violation": worst_viol, "loss_monotone": loss_monotone,
            "passed": bool(passed)}


def run_theory_suite(battery=None, out_dir=None) -> dict:
    """Run the configured battery; returns a machine-readable verdict report."""
    spec = dict(DEFAULT_BATTERY)
    spec.update(battery or {})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    checks = []
    for name in spec["checks"]:
        if name == "envelope_ridge":
            checks.append(_check_envelope(spec, "ridge"))
        elif name == "envelope_proximal":
            checks.append(_check_envelope(spec, "proximal"))
        elif name == "kalman":
            checks.append(_check_kalman(spec))
        elif name == "closed_form_optimality":
            checks.append(_check_closed_form_optimality(spec))
        elif name == "critical_points":
            checks.append(_check_critical_points(spec))
        elif name == "functional_gradient":
            checks.append(_check_functional_gradient(spec))
        elif name == "flow":
            checks.append(_check_flow(spec, out_dir))
        else:
            raise ConfigurationError(f"unknown theory check {name!r}")
    report = {
        "schema_version": SCHEMA_VERSION,
        "passed": all(c["passed"] for c in checks),
        "checks": checks,
    }
    if not spec["checks"]:
        report["warning"] = "empty battery: nothing was verified"
    if out_dir:
        with open(os.path.join(out_dir, "verify_report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
