"""Reference training strategies: naive, cumulative, and experience replay.

All baselines share the centroid classifier machinery of the main method, so
accuracy differences between strategies measure the continual-learning
mechanism rather than the classifier family. Batches that span several tasks
(replayed or merged) are scored per task: each task's rows are embedded by
that task's head and matched against that task's centroids; the per-task
losses recombine weighted by row counts, i.e. a plain mean over all rows.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor
from .core import (
    CentroidStore,
    StepResult,
    TrainConfig,
    live_centroids,
    prototypical_loss,
    til_training_step,
)
from .nn import MultiHeadModel
from .scenarios import MixedBatch, Scenario, TaskSpec

STRATEGIES = ("naive", "cumulative", "er", "cm")


def naive_step(model: MultiHeadModel, batch_x, batch_y_local, support_x, support_y,
               task_spec: TaskSpec, config: TrainConfig, opt: SGD) -> StepResult:
    """Prototypical loss only: no regularizer, no memory."""
    unregularized = replace(config, reg_weight=0.0)
    return til_training_step(model, None, batch_x, batch_y_local,
                             support_x, support_y, task_spec, unregularized, opt)


def cumulative_dataset(scenario: Scenario, upto_task: int):
    """Union of the train splits of tasks 0..upto_task, with global labels."""
    xs, ys, tids = [], [], []
    for tid in range(upto_task + 1):
        task = scenario.train_split(tid)
        xs.append(task.train_x)
        ys.append(task.global_train_y())
        tids.append(np.full(len(task.train_y), tid, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(tids)


def _grouped_prototypical_step(model: MultiHeadModel, x, y_global, task_ids,
                               centroid_provider, opt: SGD) -> StepResult:
    """Mean per-row prototypical loss over a batch spanning several tasks."""
    task_ids = np.asarray(task_ids)
    groups = np.unique(task_ids)
    n_total = len(x)
    with Tape() as tape:
        feats = model.features(x, train=True)
        total = None
        for tid in groups:
            rows = np.flatnonzero(task_ids == tid)
            selector = np.zeros((len(rows), n_total))
            selector[np.arange(len(rows)), rows] = 1.0
            emb = model.embed_features(ad.matmul(Tensor(selector), feats), int(tid))
            cents, classes = centroid_provider(int(tid))
            offset = classes[0]
            local = np.asarray(y_global)[rows] - offset
            part = ad.scale(prototypical_loss(emb, local, cents), len(rows) / n_total)
            total = part if total is None else ad.add(total, part)
    result = StepResult(total.item(), total.item())
    tape.backward(total)
    opt.step()
    return result


def er_step(model: MultiHeadModel, mixed: MixedBatch, support_x, support_y,
            task_spec: TaskSpec, store: CentroidStore, config: TrainConfig,
            opt: SGD) -> StepResult:
    """Replay baseline: prototypical loss over current plus memory rows.

    Current-task centroids are live (recomputed from the support set); past
    tasks' rows are pulled toward their frozen centroids. No distillation term.
    """
    tid = task_spec.task_id
    if np.all(mixed.task_ids == tid):
        local = mixed.y - task_spec.label_offset
        return naive_step(model, mixed.x, local, support_x, support_y,
                          task_spec, config, opt)

    live_holder: dict[int, Tensor] = {}

    def provider(group_tid: int):
        if group_tid == tid:
            cents = live_centroids(model, support_x, support_y, tid,
                                   task_spec.n_classes, train=True)
            live_holder[tid] = cents
            return cents, list(task_spec.classes)
        arr, classes = store.matrix(group_tid)
        return Tensor(arr), classes

    return _grouped_prototypical_step(model, mixed.x, mixed.y, mixed.task_ids,
                                      provider, opt)


def cumulative_step(model: MultiHeadModel, x, y_global, task_ids,
                    scenario: Scenario, config: TrainConfig, opt: SGD) -> StepResult:
    """Joint-training upper bound: every task's centroids stay live."""

    def provider(group_tid: int):
        task = scenario.tasks[group_tid]
        sx, sy = scenario.support_set(group_tid)
        cents = live_centroids(model, sx, sy, group_tid, task.n_classes, train=True)
        return cents, list(task.classes)

    return _grouped_prototypical_step(model, x, y_global, task_ids, provider, opt)
