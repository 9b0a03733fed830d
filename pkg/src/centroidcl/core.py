"""Centroid-matching training and inference.

Training moves each sample's embedding toward the centroid of its class,
computed from a held-out support set on every step so the centroids track the
live model. From the second task on, an embedding-distance term against a
frozen snapshot of the model preserves what past heads used to extract. For
class-incremental runs, per-task merging maps pull every task's embedding
space into one shared space where all classes seen so far compete.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor, as_tensor
from .nn import MERGING_VARIANTS, MultiHeadModel
from .scenarios import MixedBatch, ReplayMemory, TaskSpec


@dataclass
class TrainConfig:
    """Hyperparameters shared by every training strategy."""

    reg_weight: float = 0.1          # weight of the embedding-distance term
    support_size: int = 100
    memory_capacity: int = 500
    merging_variant: str = "scale_translate"
    epochs: int = 20
    batch_size: int = 32
    mix_fraction: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ValueError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if self.support_size < 1:
            raise ValueError("support_size must be >= 1")
        if self.memory_capacity < 1:
            raise ValueError("memory_capacity must be >= 1")
        if self.merging_variant not in MERGING_VARIANTS:
            raise ValueError(f"unknown merging variant {self.merging_variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.mix_fraction < 1.0:
            raise ValueError(f"mix_fraction must be in (0, 1), got {self.mix_fraction}")


@dataclass
class StepResult:
    loss: float
    prototypical: float
    regularizer: float | None = None
    projection: float | None = None


class CentroidStore:
    """Frozen per-task, per-class centroids keyed by global label."""

    def __init__(self):
        self._frozen: dict[int, dict[int, np.ndarray]] = {}

    def freeze(self, task_id: int, centroids: dict[int, np.ndarray]) -> None:
        if task_id in self._frozen:
            raise ValueError(f"centroids for task {task_id} are already frozen")
        stored = {}
        for label, vec in centroids.items():
            arr = np.array(vec, dtype=np.float64)
            arr.setflags(write=False)
            stored[int(label)] = arr
        self._frozen[task_id] = stored

    def is_frozen(self, task_id: int) -> bool:
        return task_id in self._frozen

    def tasks(self) -> list[int]:
        return sorted(self._frozen)

    def get(self, task_id: int) -> dict[int, np.ndarray]:
        if task_id not in self._frozen:
            raise KeyError(f"no frozen centroids for task {task_id}")
        return self._frozen[task_id]

    def matrix(self, task_id: int) -> tuple[np.ndarray, list[int]]:
        """Centroids stacked in ascending global-label order."""
        entry = self.get(task_id)
        classes = sorted(entry)
        return np.stack([entry[c] for c in classes]), classes

    def save_text(self, path: str) -> None:
        lines = []
        for task_id in self.tasks():
            for label in sorted(self._frozen[task_id]):
                vec = self._frozen[task_id][label]
                lines.append("\t".join([str(task_id), str(label)] +
                                       [repr(float(v)) for v in vec]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_text(cls, path: str) -> "CentroidStore":
        store = cls()
        pending: dict[int, dict[int, np.ndarray]] = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            fields = line.split("\t")
            task_id, label = int(fields[0]), int(fields[1])
            pending.setdefault(task_id, {})[label] = np.array(
                [float(v) for v in fields[2:]])
        for task_id, cents in sorted(pending.items()):
            store.freeze(task_id, cents)
        return store


# ---------------------------------------------------------------------------
# centroids and probabilities
# ---------------------------------------------------------------------------

def live_centroids(model: MultiHeadModel, support_x, support_y, task_id: int,
                   n_classes: int, train: bool = True) -> Tensor:
    """Per-class mean embeddings of the support set, rows ordered by local label.

    Gradients flow through the support embeddings, so the centroids follow the
    live model within a training step.
    """
    support_y = np.asarray(support_y, dtype=np.int64)
    if support_y.size and support_y.max() >= n_classes:
        raise ValueError(f"support label {support_y.max()} out of range [0, {n_classes})")
    counts = np.bincount(support_y, minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no support samples")
    emb = model.embed(support_x, task_id, train=train)
    selector = np.zeros((n_classes, len(support_y)))
    selector[support_y, np.arange(len(support_y))] = 1.0 / counts[support_y]
    return ad.matmul(Tensor(selector), emb)


def compute_centroids(model: MultiHeadModel, support_x, support_y, task_id: int,
                      n_classes: int) -> dict[int, np.ndarray]:
    """Evaluation-mode centroids as plain vectors, keyed by local label."""
    cents = live_centroids(model, support_x, support_y, task_id, n_classes, train=False)
    return {k: cents.values[k].copy() for k in range(n_classes)}


def rowwise_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between matching rows of two [B, E] tensors."""
    diff = ad.sub(a, b)
    return ad.sqrt(ad.sum_reduce(ad.mul(diff, diff), axis=1))


def class_probabilities(embeddings, centroids) -> Tensor:
    """Distribution over classes from distances to centroids: softmax(-d)."""
    emb = as_tensor(embeddings)
    cents = as_tensor(centroids)
    d = ad.sqrt(ad.sqeuclidean(emb, cents))
    return ad.softmax(ad.neg(d))


def prototypical_loss(embeddings, labels, centroids) -> Tensor:
    """Mean negative log probability of the true class.

    Computed in log space (shifted log-sum-exp) so large distances degrade
    gracefully instead of underflowing the probabilities.
    """
    emb = as_tensor(embeddings)
    cents = as_tensor(centroids)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = cents.shape[0]
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if len(labels) != emb.shape[0]:
        raise ValueError("one label per embedding row required")
    d = ad.sqrt(ad.sqeuclidean(emb, cents))
    scores = ad.neg(d)
    shift = float(scores.values.max())  # constant shift: cancels in the gradient
    shifted = ad.sub(scores, Tensor(np.full(scores.shape, shift)))
    lse = ad.add(ad.log(ad.sum_reduce(ad.exp(shifted), axis=1)),
                 Tensor(np.full(emb.shape[0], shift)))
    onehot = np.zeros(scores.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    true_scores = ad.sum_reduce(ad.mul(scores, Tensor(onehot)), axis=1)
    return ad.mean_reduce(ad.sub(lse, true_scores))


def distill_regularizer(model: MultiHeadModel, snapshot: MultiHeadModel,
                        batch_x, current_task: int) -> Tensor:
    """Mean embedding drift against the snapshot, averaged over past heads.

    Both sides are normalized with the same batch statistics, so the value is
    exactly zero whenever the live parameters equal the snapshot's. The sum
    over past heads is divided by the current task count, not the number of
    past heads.
    """
    past = [t for t in model.task_ids() if t < current_task]
    if not past:
        raise ValueError("the regularizer needs at least one past task")
    missing = [t for t in past if t not in snapshot.heads]
    if missing:
        raise KeyError(f"snapshot is missing heads for tasks {missing}")
    live_feats = model.features(batch_x, train=True)
    snap_feats = snapshot.features(batch_x, train=True)
    total = None
    for tid in past:
        live = model.embed_features(live_feats, tid)
        ref = snapshot.embed_features(snap_feats, tid)
        term = ad.mean_reduce(rowwise_euclidean(live, ref))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / (current_task + 1))


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def til_training_step(model: MultiHeadModel, snapshot: MultiHeadModel | None,
                      batch_x, batch_y_local, support_x, support_y,
                      task_spec: TaskSpec, config: TrainConfig,
                      opt: SGD) -> StepResult:
    """One optimization step of the task-incremental loss."""
    tid = task_spec.task_id
    past = [t for t in model.task_ids() if t < tid]
    reg_val = None
    with Tape() as tape:
        cents = live_centroids(model, support_x, support_y, tid,
                               task_spec.n_classes, train=True)
        emb = model.embed(batch_x, tid, train=True)
        proto = prototypical_loss(emb, batch_y_local, cents)
        loss = proto
        if past and config.reg_weight > 0:
            if snapshot is None:
                raise ValueError("a snapshot is required once past tasks exist")
            reg = distill_regularizer(model, snapshot, batch_x, tid)
            loss = ad.add(loss, ad.scale(reg, config.reg_weight))
            reg_val = reg.item()
    result = StepResult(loss.item(), proto.item(), regularizer=reg_val)
    tape.backward(loss)
    opt.step()
    return result


def merged_space(model: MultiHeadModel, x, upto_task: int, store: CentroidStore,
                 live_map: dict[int, tuple[Tensor, list[int]]] | None = None,
                 train: bool = False):
    """Shared-space sample embeddings and projected centroids.

    The sample embedding is the average of every task's projected embedding;
    each task's centroids are mapped by that task's own merging map (frozen
    centroids unless a live tensor is supplied for the task). Returns
    ``(z, centroids, global_classes)``.
    """
    tasks = [t for t in model.task_ids() if t <= upto_task]
    if not tasks:
        raise ValueError(f"no heads at or below task {upto_task}")
    feats = model.features(x, train=train)
    z = None
    for tid in tasks:
        proj = model.project(model.embed_features(feats, tid), tid, path="embedding")
        z = proj if z is None else ad.add(z, proj)
    z = ad.scale(z, 1.0 / len(tasks))
    blocks: list[Tensor] = []
    classes: list[int] = []
    for tid in tasks:
        if live_map is not None and tid in live_map:
            cmat, cls = live_map[tid]
        else:
            arr, cls = store.matrix(tid)
            cmat = Tensor(arr)
        blocks.append(model.project(cmat, tid, path="centroid"))
        classes.extend(cls)
    return z, ad.concat(blocks, axis=0), classes


def projected_probabilities(model: MultiHeadModel, x, upto_task: int,
                            store: CentroidStore,
                            live_map: dict[int, tuple[Tensor, list[int]]] | None = None,
                            train: bool = False):
    """Distribution over all classes seen so far, in the merged space."""
    z, cents, classes = merged_space(model, x, upto_task, store, live_map, train)
    d = ad.sqrt(ad.sqeuclidean(z, cents))
    return ad.softmax(ad.neg(d)), classes


def cil_training_step(model: MultiHeadModel, snapshot: MultiHeadModel | None,
                      mixed: MixedBatch, support_x, support_y,
                      task_spec: TaskSpec, store: CentroidStore,
                      config: TrainConfig, opt: SGD) -> StepResult:
    """One optimization step of the class-incremental loss.

    The task-incremental loss applies to current-task rows with local labels;
    from the second task on, a projection loss over the whole mixed batch
    (global labels) trains the merging maps and keeps past heads engaged.
    """
    tid = task_spec.task_id
    past = [t for t in model.task_ids() if t < tid]
    current = mixed.task_ids == tid
    if not current.any():
        raise ValueError("mixed batch holds no current-task samples")
    cur_x = mixed.x[current]
    cur_y_local = mixed.y[current] - task_spec.label_offset
    reg_val = None
    proj_val = None
    with Tape() as tape:
        cents = live_centroids(model, support_x, support_y, tid,
                               task_spec.n_classes, train=True)
        emb = model.embed(cur_x, tid, train=True)
        proto = prototypical_loss(emb, cur_y_local, cents)
        loss = proto
        if past and config.reg_weight > 0:
            if snapshot is None:
                raise ValueError("a snapshot is required once past tasks exist")
            reg = distill_regularizer(model, snapshot, cur_x, tid)
            loss = ad.add(loss, ad.scale(reg, config.reg_weight))
            reg_val = reg.item()
        if past:
            live_map = {tid: (cents, list(task_spec.classes))}
            z, merged_cents, classes = merged_space(
                model, mixed.x, tid, store, live_map=live_map, train=True)
            row_of = {c: i for i, c in enumerate(classes)}
            rows = np.array([row_of[int(g)] for g in mixed.y])
            proj_loss = prototypical_loss(z, rows, merged_cents)
            loss = ad.add(loss, proj_loss)
            proj_val = proj_loss.item()
    result = StepResult(loss.item(), proto.item(), regularizer=reg_val,
                        projection=proj_val)
    tape.backward(loss)
    opt.step()
    return result


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_til(model: MultiHeadModel, x, task_id: int,
                store: CentroidStore) -> np.ndarray:
    """Nearest-centroid prediction within one task's space; global labels."""
    if not store.is_frozen(task_id):
        raise ValueError(f"task {task_id} is not finalized")
    model.apply_norm_stats(task_id)
    emb = model.embed(x, task_id, train=False)
    cents, classes = store.matrix(task_id)
    d = ad.sqeuclidean(emb, Tensor(cents))  # argmin of d == argmax probability
    return np.asarray(classes, dtype=np.int64)[np.argmin(d.values, axis=1)]


def predict_cil(model: MultiHeadModel, x, store: CentroidStore,
                n_tasks: int) -> np.ndarray:
    """Merged-space prediction over all classes, task identity unknown."""
    missing = [t for t in range(n_tasks) if not store.is_frozen(t)]
    if missing:
        raise ValueError(f"tasks {missing} are not finalized")
    model.reset_eval_stats()
    probs, classes = projected_probabilities(model, x, n_tasks - 1, store)
    return np.asarray(classes, dtype=np.int64)[np.argmax(probs.values, axis=1)]


def predict_cil_taskspace(model: MultiHeadModel, x, store: CentroidStore,
                          upto_task: int) -> np.ndarray:
    """Cross-task nearest centroid with every task kept in its own space.

    Merging-free rule used by the baseline strategies: each head embeds the
    sample under its own task's normalization statistics, and the global
    argmin runs over all (task, class) distances.
    """
    columns: list[np.ndarray] = []
    classes: list[int] = []
    for tid in store.tasks():
        if tid > upto_task:
            continue
        model.apply_norm_stats(tid)
        emb = model.embed(x, tid, train=False)
        cents, cls = store.matrix(tid)
        columns.append(ad.sqeuclidean(emb, Tensor(cents)).values)
        classes.extend(cls)
    if not columns:
        raise ValueError("no finalized tasks to predict over")
    d = np.concatenate(columns, axis=1)
    return np.asarray(classes, dtype=np.int64)[np.argmin(d, axis=1)]


# ---------------------------------------------------------------------------
# task finalization
# ---------------------------------------------------------------------------

def finalize_task(model: MultiHeadModel, task_spec: TaskSpec, support_x, support_y,
                  store: CentroidStore,
                  memory: ReplayMemory | None = None) -> MultiHeadModel:
    """Freeze the task's centroids and statistics; return a fresh snapshot.

    In class-incremental mode the task's training samples go into the replay
    memory (which rebalances itself).
    """
    tid = task_spec.task_id
    if store.is_frozen(tid):
        raise ValueError(f"task {tid} is already finalized")
    model.capture_norm_stats(tid)
    model.apply_norm_stats(tid)
    cents = live_centroids(model, support_x, support_y, tid,
                           task_spec.n_classes, train=False)
    store.freeze(tid, {task_spec.global_label(k): cents.values[k]
                       for k in range(task_spec.n_classes)})
    snapshot = model.snapshot()
    if memory is not None:
        memory.store(task_spec.train_x, task_spec.global_train_y(), tid)
    return snapshot
