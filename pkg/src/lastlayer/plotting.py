"""Figure rendering for run CSVs, sweep summaries, and flow trajectories.

Figures are derived views of the delimited outputs (the CSVs stay the
canonical artifact) and are written as PNG files next to them.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .records import read_run_csv


def plot_run_csv(csv_path, out_png=None, metric_kind="mse") -> str:
    """Training curve for one run: train loss and eval metric vs iteration."""
    records = read_run_csv(csv_path)
    out_png = out_png or os.path.splitext(csv_path)[0] + ".png"
    iters = [r.iteration for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(iters, [r.train_loss for r in records], lw=1.2)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("train loss")
    if all(r.train_loss > 0 for r in records):
        axes[0].set_yscale("log")
    axes[1].plot(iters, [r.eval_metric for r in records], lw=1.2, color="tab:orange")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel(metric_kind)
    if metric_kind == "mse" and all(r.eval_metric > 0 for r in records):
        axes[1].set_yscale("log")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_sweep_summary(out_dir) -> list:
    """One panel per batch size: eval curves of the selected cell, all seeds,
    plus a final-metric-vs-hyperparameter overview."""
    with open(os.path.join(out_dir, "summary.json")) as fh:
        summary = json.load(fh)
    made = []
    cells = {c["id"]: c for c in summary["cells"]}
    best = cells[summary["best_cell"]]
    batch_sizes = sorted({c["params"]["batch_size"] for c in summary["cells"]})

    fig, axes = plt.subplots(1, max(len(batch_sizes), 1),
                             figsize=(4 * max(len(batch_sizes), 1), 3.2),
                             squeeze=False)
    for ax, bs in zip(axes[0], batch_sizes):
        candidates = [c for c in summary["cells"]
                      if c["params"]["batch_size"] == bs and c["n_ok"] > 0]
        if not candidates:
            continue
        pick = (max if summary["metric_kind"] == "accuracy" else min)(
            candidates, key=lambda c: c["mean_final_val_metric"])
        for run in pick["runs"]:
            if run["status"] != "ok":
                continue
            records = read_run_csv(os.path.join(out_dir, run["csv"]))
            ax.plot([r.iteration for r in records], [r.eval_metric for r in records],
                    lw=1.0, alpha=0.8, label=f"seed {run['seed']}")
        ax.set_title(f"batch={bs} ({pick['id']})", fontsize=9)
        ax.set_xlabel("iteration")
        ax.set_ylabel(summary["metric_kind"])
        if summary["metric_kind"] == "mse":
            ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = os.path.join(out_dir, "sweep_curves.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    made.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = [c["id"] for c in summary["cells"] if c["n_ok"] > 0]
    values = [c["mean_final_val_metric"] for c in summary["cells"] if c["n_ok"] > 0]
    order = np.argsort(values)
    ax.barh([labels[i] for i in order], [values[i] for i in order],
            color=["tab:green" if labels[i] == best["id"] else "tab:blue" for i in order])
    ax.set_xlabel(f"mean final val {summary['metric_kind']}")
    ax.tick_params(axis="y", labelsize=7)
    fig.tight_layout()
    path = os.path.join(out_dir, "sweep_cells.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    made.append(path)
    return made


def plot_trajectory_csv(csv_path, out_png=None) -> str:
    """Flow diagnostics: attainable-gram spectrum, residual norm, induced loss."""
    out_png = out_png or os.path.splitext(csv_path)[0] + ".png"
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
        table = np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])
    t = table[:, 0]
    eig_cols = [i for i, h in enumerate(header) if h.startswith("eig")]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for i in eig_cols:
        axes[0].plot(t, table[:, i], lw=1.0, label=header[i])
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("attainable gram eigenvalues")
    axes[0].legend(fontsize=7)
    axes[1].plot(t, table[:, header.index("residual_norm")], lw=1.0)
    axes[1].set_yscale("log")
    axes[1].set_xlabel("t")
    axes[1].set_ylabel("residual norm")
    axes[2].plot(t, table[:, header.index("induced_loss")], lw=1.0, color="tab:red")
    axes[2].set_yscale("log")
    axes[2].set_xlabel("t")
    axes[2].set_ylabel("induced loss")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_dfiv_summary(out_dir, summary) -> str:
    """Per-seed test-MSE curves with final current/reestimate markers."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for row in summary["seeds"]:
        records = read_run_csv(os.path.join(out_dir, row["csv"]))
        ax.plot([r.iteration for r in records], [r.eval_metric for r in records],
                lw=1.0, label=f"seed {row['seed']}")
        ax.scatter([records[-1].iteration], [row["reestimate_mse"]], marker="x", s=30)
    if summary.get("naive_mse_mean") is not None:
        ax.axhline(summary["naive_mse_mean"], ls="--", color="gray",
                   label="confounded baseline")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("test MSE vs structural function")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = os.path.join(out_dir, "dfiv_curves.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
