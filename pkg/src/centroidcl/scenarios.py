"""Disjoint task streams, support-set extraction, and fixed-size replay memory.

A scenario remaps the source dataset's class ids onto a contiguous global label
space: task ``i`` owns global labels ``[offset_i, offset_i + classes_per_task)``,
so every label is ``offset + local``. Train splits are gated behind a
sequential-access state machine (a future task's training data cannot be read
before the current task is completed); test splits are always readable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODES = ("til", "cil")
GROUPINGS = ("sequential", "shuffled")
GENERATORS = ("gaussian_clusters", "concentric_rings", "interleaved_moons")


class ScenarioError(RuntimeError):
    """Violation of scenario construction rules or access discipline."""


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def make_synthetic_samples(generator: str, class_params: list[dict],
                           n_per_class: int, seed,
                           input_dim: int | None = None):
    """Generate labeled samples in R^input_dim, ``n_per_class`` rows per class.

    Returns ``(x, y)`` with labels ``0..len(class_params)-1``; deterministic
    for a fixed seed.
    """
    if generator not in GENERATORS:
        raise ScenarioError(f"unknown generator {generator!r}, expected one of {GENERATORS}")
    if n_per_class < 1:
        raise ScenarioError(f"n_per_class must be >= 1, got {n_per_class}")
    if not class_params:
        raise ScenarioError("class_params must be non-empty")
    rng = _rng(seed)

    if generator == "gaussian_clusters":
        entries = []
        for i, params in enumerate(class_params):
            mean = np.asarray(params["mean"], dtype=np.float64)
            sigma = float(params["sigma"])
            if sigma <= 0:
                raise ScenarioError(f"class {i}: sigma must be > 0, got {sigma}")
            if input_dim is not None and mean.shape != (input_dim,):
                raise ScenarioError(
                    f"class {i}: mean has dimension {mean.shape[0]}, expected {input_dim}")
            axes = np.asarray(params.get("axes", np.zeros((0, mean.shape[0]))),
                              dtype=np.float64)
            axis_sigma = np.asarray(params.get("axis_sigma", np.zeros(len(axes))),
                                    dtype=np.float64)
            if axes.ndim != 2 or axes.shape[1] != mean.shape[0] \
                    or len(axis_sigma) != len(axes):
                raise ScenarioError(f"class {i}: axes/axis_sigma shapes disagree")
            if np.any(axis_sigma < 0):
                raise ScenarioError(f"class {i}: axis_sigma must be nonnegative")
            entries.append((mean, sigma, axes, axis_sigma))
        dim = entries[0][0].shape[0]
        rows, labels = [], []
        for label, (mean, sigma, axes, axis_sigma) in enumerate(entries):
            if mean.shape[0] != dim:
                raise ScenarioError("class means must share one dimension")
            pts = mean + rng.normal(0.0, sigma, size=(n_per_class, dim))
            if len(axes):
                # extra variance along the given directions
                pts += (rng.normal(size=(n_per_class, len(axes))) * axis_sigma) @ axes
            rows.append(pts)
            labels.append(np.full(n_per_class, label, dtype=np.int64))
        return np.concatenate(rows), np.concatenate(labels)

    dim = input_dim if input_dim is not None else 2
    if dim < 2:
        raise ScenarioError(f"{generator} requires input_dim >= 2, got {dim}")
    rows, labels = [], []
    if generator == "concentric_rings":
        for label, params in enumerate(class_params):
            radius = float(params["radius"])
            noise = float(params["noise"])
            if radius <= 0 or noise <= 0:
                raise ScenarioError(
                    f"class {label}: radius and noise must be > 0, "
                    f"got radius={radius} noise={noise}")
            theta = rng.uniform(0.0, 2.0 * np.pi, size=n_per_class)
            pts = np.zeros((n_per_class, dim))
            pts[:, 0] = radius * np.cos(theta)
            pts[:, 1] = radius * np.sin(theta)
            pts += rng.normal(0.0, noise, size=pts.shape)
            rows.append(pts)
            labels.append(np.full(n_per_class, label, dtype=np.int64))
        return np.concatenate(rows), np.concatenate(labels)

    # interleaved_moons: classes pair up into interleaving crescents; each
    # pair after the first is shifted along the first axis.
    for label, params in enumerate(class_params):
        noise = float(params["noise"])
        if noise <= 0:
            raise ScenarioError(f"class {label}: noise must be > 0, got {noise}")
        theta = rng.uniform(0.0, np.pi, size=n_per_class)
        pts = np.zeros((n_per_class, dim))
        if label % 2 == 0:
            pts[:, 0] = np.cos(theta)
            pts[:, 1] = np.sin(theta)
        else:
            pts[:, 0] = 1.0 - np.cos(theta)
            pts[:, 1] = 0.5 - np.sin(theta)
        pts[:, 0] += (label // 2) * 3.0
        pts += rng.normal(0.0, noise, size=pts.shape)
        rows.append(pts)
        labels.append(np.full(n_per_class, label, dtype=np.int64))
    return np.concatenate(rows), np.concatenate(labels)


def random_gaussian_params(n_classes: int, input_dim: int, spread: float,
                           sigma: float, seed) -> list[dict]:
    """Class parameters with means drawn from N(0, spread^2 I)."""
    rng = _rng(seed)
    means = rng.normal(0.0, spread, size=(n_classes, input_dim))
    return [{"mean": means[i], "sigma": sigma} for i in range(n_classes)]


def interfering_gaussian_params(n_tasks: int, classes_per_task: int, input_dim: int,
                                spread: float, interference: float, sigma: float,
                                seed) -> list[dict]:
    """Class parameters for tasks whose discriminative axes conflict.

    Each task separates its classes along its own orthogonal axes, while its
    samples carry large extra variance (scale ``interference``) along every
    *other* task's axes. Fitting a task therefore flattens exactly the
    directions earlier tasks classify by, which is what makes unmitigated
    sequential training forget at desk scale. Class ``c`` in the returned list
    belongs to task ``c // classes_per_task``, matching sequential grouping.
    """
    if interference < 0:
        raise ScenarioError(f"interference must be >= 0, got {interference}")
    rng = _rng(seed)
    axes_per_task = 1 if classes_per_task == 2 else classes_per_task
    total_axes = n_tasks * axes_per_task
    if total_axes <= input_dim:
        basis = np.linalg.qr(rng.normal(size=(input_dim, input_dim)))[0][:, :total_axes]
    else:
        # more task axes than dimensions: fall back to random unit directions
        basis = rng.normal(size=(input_dim, total_axes))
        basis /= np.linalg.norm(basis, axis=0)
    blocks = [basis[:, t * axes_per_task:(t + 1) * axes_per_task]
              for t in range(n_tasks)]
    params = []
    for t in range(n_tasks):
        own = blocks[t]
        other_axes = np.concatenate(
            [blocks[j].T for j in range(n_tasks) if j != t]) if n_tasks > 1 else \
            np.zeros((0, input_dim))
        for k in range(classes_per_task):
            if classes_per_task == 2:
                mean = (spread / 2.0) * own[:, 0] * (1.0 if k == 1 else -1.0)
            else:
                # orthonormal class axes: pairwise mean distance == spread
                mean = (spread / np.sqrt(2.0)) * own[:, k]
            params.append({
                "mean": mean,
                "sigma": sigma,
                "axes": other_axes,
                "axis_sigma": np.full(len(other_axes), interference),
            })
    return params


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Labeled train/test pools keyed by the source class ids."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        self.train_x = np.asarray(self.train_x, dtype=np.float64)
        self.train_y = np.asarray(self.train_y, dtype=np.int64)
        self.test_x = np.asarray(self.test_x, dtype=np.float64)
        self.test_y = np.asarray(self.test_y, dtype=np.int64)
        if len(self.train_x) != len(self.train_y) or len(self.test_x) != len(self.test_y):
            raise ScenarioError("feature/label row counts disagree")

    @property
    def classes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.train_y, self.test_y]))

    @property
    def input_dim(self) -> int:
        return self.train_x.shape[1]

    @classmethod
    def from_files(cls, train_path: str, test_path: str | None = None,
                   test_fraction: float = 0.2, seed: int = 0) -> "Dataset":
        x, y = load_delimited(train_path)
        if test_path is not None:
            tx, ty = load_delimited(test_path)
            return cls(x, y, tx, ty)
        if not 0.0 < test_fraction < 1.0:
            raise ScenarioError(f"test_fraction must be in (0, 1), got {test_fraction}")
        rng = _rng(seed)
        train_idx, test_idx = [], []
        for cls_id in np.unique(y):
            idx = rng.permutation(np.flatnonzero(y == cls_id))
            n_test = max(1, int(round(test_fraction * len(idx))))
            test_idx.append(idx[:n_test])
            train_idx.append(idx[n_test:])
        train_idx = np.concatenate(train_idx)
        test_idx = np.concatenate(test_idx)
        return cls(x[train_idx], y[train_idx], x[test_idx], y[test_idx])


def load_delimited(path: str):
    """Read rows of "label value value ..."; optional header, comma or whitespace."""
    lines = Path(path).read_text().splitlines()
    rows = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",") if "," in line else line.split()
        try:
            values = [float(f) for f in fields]
        except ValueError:
            if lineno == 1:
                continue  # header
            raise ScenarioError(f"{path}:{lineno}: non-numeric row")
        rows.append(values)
    if not rows:
        raise ScenarioError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2 or any(len(r) != width for r in rows):
        raise ScenarioError(f"{path}: rows must be one label plus a fixed number of features")
    data = np.asarray(rows)
    labels = data[:, 0]
    if not np.all(labels == np.round(labels)):
        raise ScenarioError(f"{path}: labels must be integers")
    return data[:, 1:], labels.astype(np.int64)


# ---------------------------------------------------------------------------
# tasks and scenarios
# ---------------------------------------------------------------------------

@dataclass
class TaskSpec:
    """One task: disjoint class set, train/support/test splits, label offset."""

    task_id: int
    label_offset: int
    source_classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray      # local labels 0..n_classes-1
    support_x: np.ndarray
    support_y: np.ndarray    # local labels
    test_x: np.ndarray
    test_y: np.ndarray       # local labels

    @property
    def n_classes(self) -> int:
        return len(self.source_classes)

    @property
    def classes(self) -> tuple[int, ...]:
        """Global labels owned by this task."""
        return tuple(range(self.label_offset, self.label_offset + self.n_classes))

    def global_label(self, local: int) -> int:
        if not 0 <= local < self.n_classes:
            raise ScenarioError(
                f"task {self.task_id}: local label {local} out of range "
                f"[0, {self.n_classes})")
        return self.label_offset + local

    def local_label(self, global_label: int) -> int:
        local = global_label - self.label_offset
        if not 0 <= local < self.n_classes:
            raise ScenarioError(
                f"task {self.task_id}: global label {global_label} not owned")
        return local

    def global_train_y(self) -> np.ndarray:
        return self.train_y + self.label_offset

    def global_test_y(self) -> np.ndarray:
        return self.test_y + self.label_offset


class Scenario:
    """Ordered disjoint tasks with sequential access to training data."""

    def __init__(self, tasks: list[TaskSpec], mode: str):
        if mode not in MODES:
            raise ScenarioError(f"unknown mode {mode!r}, expected one of {MODES}")
        self.tasks = tasks
        self.mode = mode
        self._completed = 0

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def completed(self) -> int:
        return self._completed

    def _check_access(self, task_id: int) -> TaskSpec:
        if not 0 <= task_id < self.n_tasks:
            raise ScenarioError(f"task {task_id} does not exist")
        if task_id > self._completed:
            raise ScenarioError(
                f"task {task_id} is not available yet: task {self._completed} "
                "must be completed first")
        return self.tasks[task_id]

    def train_split(self, task_id: int) -> TaskSpec:
        return self._check_access(task_id)

    def support_set(self, task_id: int):
        task = self._check_access(task_id)
        return task.support_x, task.support_y

    def test_split(self, task_id: int):
        # Test data is exempt from the sequential-access rule.
        if not 0 <= task_id < self.n_tasks:
            raise ScenarioError(f"task {task_id} does not exist")
        task = self.tasks[task_id]
        return task.test_x, task.test_y

    def complete_task(self, task_id: int) -> None:
        if task_id != self._completed:
            raise ScenarioError(
                f"cannot complete task {task_id}: current task is {self._completed}")
        self._completed += 1

    def classes_up_to(self, task_id: int) -> list[int]:
        out: list[int] = []
        for task in self.tasks[:task_id + 1]:
            out.extend(task.classes)
        return out


def build_scenario(dataset: Dataset, n_tasks: int, classes_per_task: int,
                   mode: str, support_size: int, seed,
                   grouping: str = "sequential") -> Scenario:
    """Group classes into disjoint tasks and carve out per-task support sets.

    The support set is stratified: ``support_size // n_classes`` samples per
    class, remainder going to the lowest local class ids; support samples are
    removed from the train split.
    """
    if grouping not in GROUPINGS:
        raise ScenarioError(f"unknown grouping {grouping!r}, expected one of {GROUPINGS}")
    if n_tasks < 1 or classes_per_task < 1:
        raise ScenarioError("n_tasks and classes_per_task must be >= 1")
    if support_size < classes_per_task:
        raise ScenarioError(
            f"support_size {support_size} cannot cover {classes_per_task} classes "
            "with at least one sample each")
    classes = dataset.classes
    needed = n_tasks * classes_per_task
    if needed > len(classes):
        raise ScenarioError(
            f"need {needed} classes ({n_tasks} tasks x {classes_per_task}), "
            f"dataset has {len(classes)}")
    rng = _rng(seed)
    ordered = classes if grouping == "sequential" else rng.permutation(classes)

    tasks = []
    for task_id in range(n_tasks):
        chunk = [int(c) for c in
                 ordered[task_id * classes_per_task:(task_id + 1) * classes_per_task]]
        offset = task_id * classes_per_task

        base, extra = divmod(support_size, classes_per_task)
        train_parts, support_parts = [], []
        train_labels, support_labels = [], []
        test_parts, test_labels = [], []
        for local, source in enumerate(chunk):
            share = base + (1 if local < extra else 0)
            idx = np.flatnonzero(dataset.train_y == source)
            if share > len(idx):
                raise ScenarioError(
                    f"task {task_id} class {source}: support share {share} exceeds "
                    f"{len(idx)} available training samples")
            chosen = rng.choice(len(idx), size=share, replace=False)
            mask = np.zeros(len(idx), dtype=bool)
            mask[chosen] = True
            support_parts.append(dataset.train_x[idx[mask]])
            support_labels.append(np.full(share, local, dtype=np.int64))
            train_parts.append(dataset.train_x[idx[~mask]])
            train_labels.append(np.full(len(idx) - share, local, dtype=np.int64))
            test_idx = np.flatnonzero(dataset.test_y == source)
            test_parts.append(dataset.test_x[test_idx])
            test_labels.append(np.full(len(test_idx), local, dtype=np.int64))

        train_x = np.concatenate(train_parts)
        train_y = np.concatenate(train_labels)
        order = rng.permutation(len(train_x))
        tasks.append(TaskSpec(
            task_id=task_id,
            label_offset=offset,
            source_classes=tuple(chunk),
            train_x=train_x[order],
            train_y=train_y[order],
            support_x=np.concatenate(support_parts),
            support_y=np.concatenate(support_labels),
            test_x=np.concatenate(test_parts),
            test_y=np.concatenate(test_labels),
        ))
    return Scenario(tasks, mode)


# ---------------------------------------------------------------------------
# replay memory
# ---------------------------------------------------------------------------

@dataclass
class MixedBatch:
    x: np.ndarray
    y: np.ndarray          # global labels
    task_ids: np.ndarray
    n_current: int


class ReplayMemory:
    """Fixed-capacity sample store, rebalanced to equal per-task shares."""

    def __init__(self, capacity: int, seed=0):
        if capacity < 1:
            raise ScenarioError(f"memory capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._rng = _rng(seed)
        self._slots: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return sum(len(y) for _, y in self._slots.values())

    @property
    def stored_tasks(self) -> list[int]:
        return sorted(self._slots)

    def task_counts(self) -> dict[int, int]:
        return {tid: len(y) for tid, (x, y) in sorted(self._slots.items())}

    def store(self, x: np.ndarray, y_global: np.ndarray, task_id: int) -> None:
        """Insert one task's samples; every stored task keeps an equal share."""
        if task_id in self._slots:
            raise ScenarioError(f"task {task_id} already stored in memory")
        x = np.asarray(x, dtype=np.float64)
        y_global = np.asarray(y_global, dtype=np.int64)
        if len(x) != len(y_global):
            raise ScenarioError("feature/label row counts disagree")
        if len(x) == 0:
            raise ScenarioError(f"task {task_id}: cannot store an empty task")
        self._slots[task_id] = (x, y_global)
        n_tasks = len(self._slots)
        base, extra = divmod(self.capacity, n_tasks)
        for rank, tid in enumerate(self.stored_tasks):
            share = base + (1 if rank < extra else 0)
            sx, sy = self._slots[tid]
            if len(sy) > share:
                keep = np.sort(self._rng.choice(len(sy), size=share, replace=False))
                self._slots[tid] = (sx[keep], sy[keep])

    def flat(self):
        xs, ys, ts = [], [], []
        for tid in self.stored_tasks:
            x, y = self._slots[tid]
            xs.append(x)
            ys.append(y)
            ts.append(np.full(len(y), tid, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys), np.concatenate(ts)


def sample_mixed_batch(memory: ReplayMemory, batch_x: np.ndarray,
                       batch_y_global: np.ndarray, task_id: int,
                       mix_fraction: float, seed) -> MixedBatch:
    """Current batch plus ceil(mix_fraction * batch) memory samples drawn
    uniformly with replacement (oversampling), each tagged with its task id."""
    if not 0.0 < mix_fraction < 1.0:
        raise ScenarioError(f"mix_fraction must be in (0, 1), got {mix_fraction}")
    if len(memory) == 0:
        raise ScenarioError("cannot mix from an empty memory")
    rng = _rng(seed)
    n_mix = math.ceil(mix_fraction * len(batch_x))
    mem_x, mem_y, mem_t = memory.flat()
    pick = rng.integers(0, len(mem_y), size=n_mix)
    x = np.concatenate([batch_x, mem_x[pick]])
    y = np.concatenate([np.asarray(batch_y_global, dtype=np.int64), mem_y[pick]])
    tids = np.concatenate([np.full(len(batch_x), task_id, dtype=np.int64), mem_t[pick]])
    return MixedBatch(x=x, y=y, task_ids=tids, n_current=len(batch_x))
