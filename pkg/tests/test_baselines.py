"""Baseline strategies: naive, cumulative dataset merging, experience replay."""

import numpy as np
import pytest

from centroidcl.autodiff import SGD
from centroidcl.baselines import cumulative_dataset, cumulative_step, er_step, naive_step
from centroidcl.core import CentroidStore, TrainConfig, til_training_step
from centroidcl.scenarios import (
    Dataset,
    ReplayMemory,
    build_scenario,
    make_synthetic_samples,
    random_gaussian_params,
    sample_mixed_batch,
)

from test_core import small_task, tiny_model


def params_vector(model):
    return np.concatenate([t.values.ravel() for t in model.parameter_tensors()])


class TestNaive:
    def test_equals_til_step_with_zero_weight(self):
        task = small_task()

        def run(use_naive):
            model = tiny_model(seed=91)
            opt = SGD(model.parameter_tensors(), lr=0.01, momentum=0.9)
            if use_naive:
                naive_step(model, task.train_x, task.train_y, task.support_x,
                           task.support_y, task, TrainConfig(reg_weight=0.7), opt)
            else:
                til_training_step(model, None, task.train_x, task.train_y,
                                  task.support_x, task.support_y, task,
                                  TrainConfig(reg_weight=0.0), opt)
            return params_vector(model)

        np.testing.assert_array_equal(run(True), run(False))

    def test_single_task_naive_equals_cm(self):
        # With one task the regularizer never fires, so the strategies coincide.
        task = small_task()

        def run(step):
            model = tiny_model(seed=92)
            opt = SGD(model.parameter_tensors(), lr=0.01, momentum=0.9)
            for _ in range(5):
                step(model, opt)
            return params_vector(model)

        cm = run(lambda m, o: til_training_step(
            m, None, task.train_x, task.train_y, task.support_x, task.support_y,
            task, TrainConfig(reg_weight=0.1), o))
        naive = run(lambda m, o: naive_step(
            m, task.train_x, task.train_y, task.support_x, task.support_y,
            task, TrainConfig(reg_weight=0.1), o))
        np.testing.assert_array_equal(cm, naive)


def scenario_fixture(n_tasks=3, per_class=40, seed=0):
    n_classes = 2 * n_tasks
    params = random_gaussian_params(n_classes, 4, spread=3.0, sigma=0.3, seed=seed)
    x, y = make_synthetic_samples("gaussian_clusters", params, per_class + 10, seed=seed)
    train_idx, test_idx = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[:per_class])
        test_idx.append(idx[per_class:])
    ds = Dataset(x[np.concatenate(train_idx)], y[np.concatenate(train_idx)],
                 x[np.concatenate(test_idx)], y[np.concatenate(test_idx)])
    return build_scenario(ds, n_tasks, 2, "cil", support_size=10, seed=seed)


class TestCumulativeDataset:
    def test_first_task_unchanged(self):
        scenario = scenario_fixture()
        x, y, tids = cumulative_dataset(scenario, 0)
        task = scenario.tasks[0]
        np.testing.assert_array_equal(x, task.train_x)
        np.testing.assert_array_equal(y, task.global_train_y())

    def test_counts_add_up(self):
        scenario = scenario_fixture()
        scenario.complete_task(0)
        scenario.complete_task(1)
        x, y, tids = cumulative_dataset(scenario, 2)
        assert len(x) == 3 * (80 - 10)
        assert set(np.unique(tids)) == {0, 1, 2}

    def test_class_set_is_union(self):
        scenario = scenario_fixture()
        scenario.complete_task(0)
        x, y, _ = cumulative_dataset(scenario, 1)
        assert set(np.unique(y)) == {0, 1, 2, 3}

    def test_respects_sequential_access(self):
        scenario = scenario_fixture()
        with pytest.raises(Exception, match="not available"):
            cumulative_dataset(scenario, 1)


class TestExperienceReplay:
    def test_current_only_batch_equals_naive(self):
        task = small_task()
        from centroidcl.scenarios import MixedBatch

        def run(use_er):
            model = tiny_model(seed=93)
            opt = SGD(model.parameter_tensors(), lr=0.01, momentum=0.9)
            if use_er:
                mixed = MixedBatch(x=task.train_x, y=task.global_train_y(),
                                   task_ids=np.zeros(len(task.train_y), dtype=np.int64),
                                   n_current=len(task.train_y))
                er_step(model, mixed, task.support_x, task.support_y, task,
                        CentroidStore(), TrainConfig(), opt)
            else:
                naive_step(model, task.train_x, task.train_y, task.support_x,
                           task.support_y, task, TrainConfig(), opt)
            return params_vector(model)

        np.testing.assert_array_equal(run(True), run(False))

    def test_mixed_batch_spanning_three_tasks(self):
        model = tiny_model(n_tasks=3, seed=94)
        store = CentroidStore()
        rng = np.random.default_rng(5)
        memory = ReplayMemory(30, seed=0)
        for t in range(2):
            old = small_task(seed=t, task_id=t, offset=2 * t)
            store.freeze(t, {2 * t: rng.normal(size=3), 2 * t + 1: rng.normal(size=3)})
            memory.store(old.train_x, old.global_train_y(), t)
        task = small_task(seed=9, task_id=2, offset=4)
        mixed = sample_mixed_batch(memory, task.train_x, task.global_train_y(),
                                   2, 0.5, seed=1)
        opt = SGD(model.parameter_tensors())
        result = er_step(model, mixed, task.support_x, task.support_y, task,
                         store, TrainConfig(), opt)
        assert np.isfinite(result.loss)

    def test_gradients_reach_past_heads(self):
        model = tiny_model(n_tasks=2, seed=95)
        store = CentroidStore()
        rng = np.random.default_rng(6)
        store.freeze(0, {0: rng.normal(size=3), 1: rng.normal(size=3)})
        memory = ReplayMemory(20, seed=0)
        old = small_task(seed=1, task_id=0)
        memory.store(old.train_x, old.global_train_y(), 0)
        task = small_task(seed=2, task_id=1, offset=2)
        mixed = sample_mixed_batch(memory, task.train_x, task.global_train_y(),
                                   1, 0.5, seed=2)
        before = {n: t.values.copy() for n, t in model.heads[0].parameters("head0")}
        opt = SGD(model.parameter_tensors(), lr=0.05)
        er_step(model, mixed, task.support_x, task.support_y, task, store,
                TrainConfig(), opt)
        changed = any(not np.array_equal(t.values, before[n])
                      for n, t in model.heads[0].parameters("head0"))
        assert changed


class TestCumulativeStep:
    def test_runs_and_trains_all_heads(self):
        scenario = scenario_fixture()
        scenario.complete_task(0)
        scenario.complete_task(1)
        model = tiny_model(n_tasks=3, seed=96, dim=4)
        x, y, tids = cumulative_dataset(scenario, 2)
        opt = SGD(model.parameter_tensors(), lr=0.01)
        before = params_vector(model)
        result = cumulative_step(model, x[:24], y[:24], tids[:24], scenario,
                                 TrainConfig(), opt)
        assert np.isfinite(result.loss) and result.loss > 0
        assert not np.array_equal(before, params_vector(model))
