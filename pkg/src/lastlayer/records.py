"""Per-iteration run records and their CSV serialization.

The CSV schema is fixed: iter, train_loss, eval_metric, w_delta, wall_ms.
Files are diffable goldens: repeated runs with the same config and seed must
be byte-identical, so the volatile wall_ms column is written as 0 unless the
caller explicitly asks for measured timings (totals live in the run summary
instead).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

CSV_COLUMNS = ("iter", "train_loss", "eval_metric", "w_delta", "wall_ms")


@dataclass
class RunRecord:
    iteration: int
    train_loss: float
    eval_metric: float
    w_delta: float
    wall_ms: float = 0.0


def write_run_csv(records, path, deterministic_wall: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            wall = 0.0 if deterministic_wall else rec.wall_ms
            writer.writerow([rec.iteration, repr(float(rec.train_loss)),
                             repr(float(rec.eval_metric)), repr(float(rec.w_delta)),
                             repr(float(wall))])


def read_run_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ValueError(f"unexpected run CSV columns in {path}: {reader.fieldnames}")
        for row in reader:
            out.append(RunRecord(int(row["iter"]), float(row["train_loss"]),
                                 float(row["eval_metric"]), float(row["w_delta"]),
                                 float(row["wall_ms"])))
    return out
