"""Synthetic datasets: teacher-MLP regression and Gaussian-blob classification.

Samples are stored column-wise (inputs are m x n, targets o x n), matching
the feature-matrix convention used everywhere else. Splits follow a fixed
72/8/20 train/validation/test layout.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bk
from .errors import ConfigurationError


@dataclass
class Dataset:
    inputs: np.ndarray     # (m, n)
    targets: np.ndarray    # (o, n)

    @property
    def n(self) -> int:
        return self.inputs.shape[1]


@dataclass
class TaskData:
    train: Dataset
    val: Dataset
    test: Dataset
    kind: str              # "regression" or "classification"
    meta: dict = field(default_factory=dict)


def _split_sizes(n: int):
    n_train = int(round(0.72 * n))
    n_val = int(round(0.08 * n))
    return n_train, n_val, n - n_train - n_val


def gen_regression_task(n=256, m=6, d_out=2, teacher_width=16, noise=0.05, seed=0) -> TaskData:
    """Targets from a fixed random tanh teacher network plus Gaussian noise."""
    if n < 10 or m < 1 or d_out < 1:
        raise ConfigurationError(f"bad regression task sizes n={n} m={m} d_out={d_out}")
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((m, n))
    teacher = bk.init_backbone([m, teacher_width, d_out], "tanh", "standard",
                               seed=int(rng.integers(2**31)))
    clean, _ = bk.forward(teacher, inputs)
    targets = clean + noise * rng.standard_normal((d_out, n))
    n_train, n_val, _ = _split_sizes(n)
    cut1, cut2 = n_train, n_train + n_val
    return TaskData(
        train=Dataset(inputs[:, :cut1], targets[:, :cut1]),
        val=Dataset(inputs[:, cut1:cut2], targets[:, cut1:cut2]),
        test=Dataset(inputs[:, cut2:], targets[:, cut2:]),
        kind="regression",
        meta={"n": n, "m": m, "d_out": d_out, "teacher_width": teacher_width,
              "noise": noise, "seed": seed},
    )


def gen_classification_task(n=1000, n_classes=10, m=10, separation=6.0, seed=0) -> TaskData:
    """Gaussian blobs in R^m with one-hot targets; separation controls overlap."""
    if n_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, m))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.integers(0, n_classes, size=n)
    inputs = means[labels].T + rng.standard_normal((m, n))
    targets = np.zeros((n_classes, n))
    targets[labels, np.arange(n)] = 1.0
    n_train, n_val, _ = _split_sizes(n)
    cut1, cut2 = n_train, n_train + n_val
    return TaskData(
        train=Dataset(inputs[:, :cut1], targets[:, :cut1]),
        val=Dataset(inputs[:, cut1:cut2], targets[:, cut1:cut2]),
        test=Dataset(inputs[:, cut2:], targets[:, cut2:]),
        kind="classification",
        meta={"n": n, "n_classes": n_classes, "m": m, "separation": separation, "seed": seed},
    )


def _write_split_csv(ds: Dataset, path) -> None:
    m = ds.inputs.shape[0]
    o = ds.targets.shape[0]
    header = [f"x{i}" for i in range(m)] + [f"y{i}" for i in range(o)]
    table = np.vstack([ds.inputs, ds.targets]).T
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_split_csv(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    m = sum(1 for h in header if h.startswith("x"))
    table = np.array(rows).T
    return Dataset(table[:m], table[m:])


def save_task_bundle(task: TaskData, out_dir) -> None:
    """Write a reproducible CSV bundle: one file per split plus a meta record."""
    os.makedirs(out_dir, exist_ok=True)
    for name in ("train", "val", "test"):
        _write_split_csv(getattr(task, name), os.path.join(out_dir, f"{name}.csv"))
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump({"kind": task.kind, **task.meta}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_task_bundle(in_dir) -> TaskData:
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    kind = meta.pop("kind")
    splits = {name: _read_split_csv(os.path.join(in_dir, f"{name}.csv"))
              for name in ("train", "val", "test")}
    return TaskData(splits["train"], splits["val"], splits["test"], kind, meta)
