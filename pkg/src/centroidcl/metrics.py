"""Result matrix, accuracy and backward transfer, memory accounting, runtime log."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ResultsMatrix:
    """R[i][j] = test accuracy on task j measured after training task i.

    Entries are fractions in [0, 1], written once each; only cells with
    j <= i (tasks already seen) are admissible.
    """

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        self.n_tasks = n_tasks
        self._r = np.full((n_tasks, n_tasks), np.nan)

    def record(self, i: int, j: int, acc: float) -> None:
        if not (0 <= j <= i < self.n_tasks):
            raise ValueError(
                f"entry ({i}, {j}) out of range: need 0 <= j <= i < {self.n_tasks}")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        if not np.isnan(self._r[i, j]):
            raise ValueError(f"entry ({i}, {j}) already recorded")
        self._r[i, j] = acc

    def get(self, i: int, j: int) -> float:
        value = self._r[i, j]
        if np.isnan(value):
            raise ValueError(f"entry ({i}, {j}) not recorded")
        return float(value)

    def as_array(self) -> np.ndarray:
        return self._r.copy()

    def accuracy(self) -> float:
        """Mean of the last row: final accuracy across every task's test split."""
        last = self._r[-1]
        if np.isnan(last).any():
            raise ValueError("last row incomplete: train all tasks first")
        return float(last.mean())

    def bwt(self) -> float:
        """Mean drop from each task's just-trained accuracy, over later rows."""
        n = self.n_tasks
        if n == 1:
            raise ValueError("backward transfer is undefined for a single task")
        total = 0.0
        for i in range(1, n):
            for j in range(i):
                if np.isnan(self._r[i, j]) or np.isnan(self._r[j, j]):
                    raise ValueError(f"entry ({i}, {j}) or ({j}, {j}) missing")
                total += self._r[i, j] - self._r[j, j]
        return total / (n * (n - 1) / 2)

    def to_text(self) -> str:
        lines = []
        for i in range(self.n_tasks):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in self._r[i]]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def save_text(self, path: str) -> None:
        Path(path).write_text(self.to_text())


# ---------------------------------------------------------------------------
# memory accounting
# ---------------------------------------------------------------------------

# formula per method, in terms of the ledger's named counts
_FORMULAS = {
    "ewc": (("n_tasks", "n_params"), lambda f: f["n_tasks"] * f["n_params"]),
    "oewc": (("n_params",), lambda f: f["n_params"]),
    "rehearsal": (("input_dim", "samples_per_task", "n_tasks"),
                  lambda f: f["input_dim"] * f["samples_per_task"] * f["n_tasks"]),
    "emr": (("feature_dim", "input_dim", "samples_per_task", "n_tasks"),
            lambda f: (f["feature_dim"] + f["input_dim"])
            * f["samples_per_task"] * f["n_tasks"]),
    "cm_til": (("embedding_dim", "n_classes"),
               lambda f: f["embedding_dim"] * f["n_classes"]),
    # centroids plus the stored samples; samples_per_task holds the total here
    "cm_cil": (("embedding_dim", "n_classes", "input_dim", "samples_per_task"),
               lambda f: f["embedding_dim"] * f["n_classes"]
               + f["input_dim"] * f["samples_per_task"]),
}

MEMORY_METHODS = tuple(_FORMULAS)


@dataclass
class MemoryLedger:
    """Counts feeding one method's additional-memory formula."""

    method: str
    n_tasks: int | None = None
    n_params: int | None = None
    input_dim: int | None = None
    samples_per_task: int | None = None
    feature_dim: int | None = None
    embedding_dim: int | None = None
    n_classes: int | None = None

    def footprint(self) -> int:
        return memory_footprint(self.method, **{
            name: getattr(self, name)
            for name in ("n_tasks", "n_params", "input_dim", "samples_per_task",
                         "feature_dim", "embedding_dim", "n_classes")
            if getattr(self, name) is not None})


def memory_footprint(method: str, **fields: int) -> int:
    """Scalar count of additional memory a method keeps between tasks."""
    if method not in _FORMULAS:
        raise ValueError(f"unknown method {method!r}, expected one of {MEMORY_METHODS}")
    required, formula = _FORMULAS[method]
    for name in required:
        if name not in fields:
            raise ValueError(f"method {method!r} requires field {name!r}")
        value = fields[name]
        if not isinstance(value, (int, np.integer)) or value < 0:
            raise ValueError(f"field {name!r} must be a nonnegative integer, got {value!r}")
    return int(formula({name: int(fields[name]) for name in required}))


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------

class RuntimeLog:
    """Wall-clock seconds per task, recorded once each."""

    def __init__(self):
        self._seconds: dict[int, float] = {}

    def record(self, task_id: int, seconds: float) -> None:
        if task_id in self._seconds:
            raise ValueError(f"runtime for task {task_id} already recorded")
        if seconds < 0:
            raise ValueError("seconds must be nonnegative")
        self._seconds[task_id] = float(seconds)

    def get(self, task_id: int) -> float:
        return self._seconds[task_id]

    def items(self):
        return sorted(self._seconds.items())

    def total(self) -> float:
        return sum(self._seconds.values())
