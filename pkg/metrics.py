#!/usr/bin/env python3
"""
Continual-learning metrics: Average Accuracy, Forgetting, Harmonic Mean.

Accuracy matrices are lower triangular: a[t][i] is the accuracy on task i's
test split measured after training task t (0-based, i <= t).
"""

import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MATRIX_KINDS = ("composition", "state", "object")


class MetricError(ValueError):
    """Metric requested on an incomplete or invalid accuracy matrix."""


class AccuracyMatrix:
    """N x N accuracies; undefined (upper) cells hold NaN."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise MetricError(f"n_tasks must be positive, got {n_tasks}")
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """Build from ragged rows: rows[t] lists a[t][0..t]."""
        m = cls(len(rows))
        for t, row in enumerate(rows):
            if len(row) > t + 1:
                raise MetricError(f"row {t + 1} has {len(row)} entries, at most {t + 1} allowed")
            for i, value in enumerate(row):
                m.set(t, i, value)
        return m

    def set(self, after_task: int, task: int, accuracy: float) -> None:
        if not 0 <= task <= after_task < self.n_tasks:
            raise MetricError(f"cell ({after_task + 1}, {task + 1}) is outside the lower triangle")
        if not 0.0 <= accuracy <= 1.0:
            raise MetricError(f"accuracy {accuracy} outside [0, 1]")
        self.values[after_task, task] = accuracy

    def row(self, after_task: int) -> np.ndarray:
        return self.values[after_task, :after_task + 1]

    def row_complete(self, after_task: int) -> bool:
        return bool(np.all(np.isfinite(self.row(after_task))))

    @property
    def completed_rows(self) -> int:
        n = 0
        while n < self.n_tasks and self.row_complete(n):
            n += 1
        return n

    def __eq__(self, other):
        return (isinstance(other, AccuracyMatrix)
                and np.array_equal(self.values, other.values, equal_nan=True))


def avg_acc(m: AccuracyMatrix) -> float:
    """Mean of the final row."""
    if not m.row_complete(m.n_tasks - 1):
        raise MetricError("final row of the accuracy matrix is incomplete")
    return float(np.mean(m.row(m.n_tasks - 1)))


def session_avg_acc(m: AccuracyMatrix) -> List[float]:
    """Avg Acc after every completed session."""
    return [float(np.mean(m.row(t))) for t in range(m.completed_rows)]


def forgetting(m: AccuracyMatrix) -> float:
    """Mean over tasks 1..N-1 of (best accuracy before the last session) - (final accuracy)."""
    n = m.n_tasks
    if n < 2:
        raise MetricError("forgetting needs at least two tasks")
    if m.completed_rows < n:
        raise MetricError("forgetting needs a complete accuracy matrix")
    drops = [np.max(m.values[i:n - 1, i]) - m.values[n - 1, i] for i in range(n - 1)]
    return float(np.mean(drops))


def harmonic_mean(state_acc: float, object_acc: float) -> float:
    if state_acc < 0 or object_acc < 0:
        raise MetricError(f"accuracies must be non-negative, got {state_acc}, {object_acc}")
    if state_acc + object_acc == 0:
        return 0.0
    return 2.0 * state_acc * object_acc / (state_acc + object_acc)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    if not values:
        raise MetricError("mean_std of no values")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(matrices: Mapping[str, AccuracyMatrix]) -> Dict[str, object]:
    """Avg Acc, FTT, State, Object and HM for one run, as percentages.

    State and Object are final-row means of their own matrices; FTT is NaN
    for single-task runs.
    """
    comp = matrices["composition"]
    state = avg_acc(matrices["state"]) * 100.0
    obj = avg_acc(matrices["object"]) * 100.0
    return {
        "avg_acc": avg_acc(comp) * 100.0,
        "ftt": forgetting(comp) * 100.0 if comp.n_tasks > 1 else math.nan,
        "state": state,
        "object": obj,
        "hm": harmonic_mean(state, obj),
        "session_avg_acc": [v * 100.0 for v in session_avg_acc(comp)],
    }


# ============================================================================
# Persistence
# ============================================================================

def save_matrices(matrices: Mapping[str, AccuracyMatrix], path: Union[str, Path]) -> None:
    """CSV with columns ``metric,after_task,task_1..task_N``; empty cells are undefined."""
    n = next(iter(matrices.values())).n_tasks
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "after_task"] + [f"task_{i + 1}" for i in range(n)])
        for kind, m in matrices.items():
            if m.n_tasks != n:
                raise MetricError("matrices in one file must share the task count")
            for t in range(n):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in m.values[t]]
                writer.writerow([kind, t + 1] + cells)


def load_matrices(path: Union[str, Path]) -> Dict[str, AccuracyMatrix]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["metric", "after_task"]:
            raise MetricError(f"{path}: not an accuracy matrix file")
        n = len(header) - 2
        matrices: Dict[str, AccuracyMatrix] = {}
        for row in reader:
            if not row:
                continue
            kind, t = row[0], int(row[1]) - 1
            m = matrices.setdefault(kind, AccuracyMatrix(n))
            for i, cell in enumerate(row[2:]):
                if cell:
                    m.set(t, i, float(cell))
    if not matrices:
        raise MetricError(f"{path}: no matrix rows")
    return matrices
