"""Per-iteration training records and their CSV serialization."""

import csv
import math
import time
from typing import NamedTuple, Optional

import numpy as np


class ProgressRecord(NamedTuple):
    """One row per outer iteration (or epoch). This is also what progress
    callbacks receive. Residual fields are zero for non-ADMM methods."""

    iter: int
    wall_clock: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    primal_res: float = 0.0
    dual_res: float = 0.0
    mu: float = 0.0
    gamma_max: float = 0.0
    objective: float = float("nan")


# wall_clock is kept out of history.csv so repeated runs compare bitwise;
# it goes to timing.csv instead
HISTORY_COLUMNS = tuple(f for f in ProgressRecord._fields if f != "wall_clock")
TIMING_COLUMNS = ("iter", "wall_clock")


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class TrainHistory:
    """Rows of ``ProgressRecord`` plus free-form metadata and diagnostics."""

    def __init__(self, metadata=None):
        self.rows = []
        self.metadata = dict(metadata or {})
        self.diagnostics = {}
        self.final_state = None
        self.stop_reason = None

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def append(self, record):
        self.rows.append(record)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def best_index(self):
        """Row with the highest validation accuracy, earliest on ties; the last
        row when no validation data was tracked."""
        if not self.rows:
            return None
        best = None
        for i, row in enumerate(self.rows):
            if math.isnan(row.val_acc):
                continue
            if best is None or row.val_acc > self.rows[best].val_acc:
                best = i
        return len(self.rows) - 1 if best is None else best

    def best_row(self):
        i = self.best_index()
        return None if i is None else self.rows[i]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in HISTORY_COLUMNS])

    def write_timing_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMING_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r.iter), _fmt(r.wall_clock)])


def read_history_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: float(v) for k, v in row.items()} for row in reader]


class Stopwatch:
    def __init__(self, budget: Optional[float] = None):
        self.start = time.perf_counter()
        self.budget = budget

    def elapsed(self):
        return time.perf_counter() - self.start

    def expired(self):
        return self.budget is not None and self.elapsed() >= self.budget
