"""Experiment runner: seeded training loops, evaluation, sweeps, exports.

One seed drives everything derived for a run (data draw, class grouping,
parameter initialization, batch order, memory sampling), so a (config, seed)
pair reproduces its results bundle byte for byte. Wall-clock measurements are
kept out of the result records and written to a separate timing file.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, SGD
from .baselines import cumulative_dataset, cumulative_step, er_step, naive_step
from .config import ExperimentConfig
from .core import (
    CentroidStore,
    cil_training_step,
    finalize_task,
    predict_cil_taskspace,
    predict_til,
    projected_probabilities,
    til_training_step,
)
from .metrics import ResultsMatrix, RuntimeLog, memory_footprint
from .nn import ModelConfig, MultiHeadModel
from .pca import principal_components, project_2d
from .scenarios import (
    Dataset,
    MixedBatch,
    ReplayMemory,
    Scenario,
    build_scenario,
    make_synthetic_samples,
    interfering_gaussian_params,
    sample_mixed_batch,
)

SWEEP_AXES = ("lambda", "support_size", "memory_capacity", "merging_variant")


@dataclass
class SeedArtifacts:
    """Trained state kept in memory for exports and inspection."""

    model: MultiHeadModel
    store: CentroidStore
    scenario: Scenario


@dataclass
class SeedOutcome:
    seed: int
    status: str                      # "ok" or "aborted"
    abort_reason: str | None = None
    accuracy: float | None = None
    bwt: float | None = None
    bwt_defined: bool = False
    final_regularizer: float | None = None
    memory_scalars: int = 0
    matrix: ResultsMatrix | None = None
    runtime: RuntimeLog = field(default_factory=RuntimeLog)
    artifacts: SeedArtifacts | None = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    outcomes: list[SeedOutcome]

    @property
    def completed(self) -> list[SeedOutcome]:
        return [o for o in self.outcomes if o.status == "ok"]

    @property
    def aborted(self) -> list[SeedOutcome]:
        return [o for o in self.outcomes if o.status != "ok"]

    def aggregate(self) -> dict[str, float | int]:
        ok = self.completed
        agg: dict[str, float | int] = {"n_seeds": len(ok),
                                       "aborted_seeds": len(self.aborted)}
        for name in ("accuracy", "bwt", "final_regularizer"):
            values = [getattr(o, name) for o in ok if getattr(o, name) is not None]
            if values:
                agg[f"{name}_mean"] = float(np.mean(values))
                agg[f"{name}_std"] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        return agg


# ---------------------------------------------------------------------------
# data and scenario assembly
# ---------------------------------------------------------------------------

def _synthetic_dataset(config: ExperimentConfig, data_seed) -> Dataset:
    sc = config.scenario
    n_classes = sc.n_tasks * sc.classes_per_task
    seeds = data_seed.spawn(2)
    if sc.generator == "gaussian_clusters":
        params = interfering_gaussian_params(sc.n_tasks, sc.classes_per_task,
                                             sc.input_dim, sc.spread,
                                             sc.interference, sc.noise, seeds[0])
    elif sc.generator == "concentric_rings":
        params = [{"radius": sc.spread * (k + 1), "noise": sc.noise}
                  for k in range(n_classes)]
    else:  # interleaved_moons
        params = [{"noise": sc.noise} for _ in range(n_classes)]
    per_class = sc.train_per_class + sc.test_per_class
    x, y = make_synthetic_samples(sc.generator, params, per_class, seeds[1],
                                  input_dim=sc.input_dim)
    train_idx, test_idx = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[:sc.train_per_class])
        test_idx.append(idx[sc.train_per_class:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    return Dataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx])


def _load_dataset(config: ExperimentConfig, data_seed) -> Dataset:
    sc = config.scenario
    if sc.dataset_path is not None:
        split_seed = int(data_seed.generate_state(1)[0])
        return Dataset.from_files(sc.dataset_path, sc.test_path,
                                  sc.test_fraction, seed=split_seed)
    return _synthetic_dataset(config, data_seed)


def _model_config(config: ExperimentConfig, input_dim: int) -> ModelConfig:
    m = config.model
    # baselines carry no merging maps: their class-incremental rule works on
    # raw embeddings, so differences against cm measure the merging mechanism
    variant = config.train.merging_variant if config.strategy == "cm" else "none"
    return ModelConfig(
        input_dim=input_dim, backbone_hidden=m.backbone_hidden,
        feature_dim=m.feature_dim, embedding_dim=m.embedding_dim,
        head_hidden=m.head_hidden, proj_hidden=m.proj_hidden,
        normalize=m.normalize, merging_variant=variant,
        shared_projection=m.shared_projection)


def _uses_memory(config: ExperimentConfig) -> bool:
    if config.strategy == "er":
        return True
    return config.strategy == "cm" and config.scenario.mode == "cil"


def _cil_rule(config: ExperimentConfig) -> str:
    if config.cil_eval != "auto":
        return config.cil_eval
    return "merged" if config.strategy == "cm" else "per_task"


def _predict_cil_merged(model: MultiHeadModel, x, store: CentroidStore,
                        upto: int) -> np.ndarray:
    model.reset_eval_stats()
    probs, classes = projected_probabilities(model, x, upto, store)
    return np.asarray(classes, dtype=np.int64)[np.argmax(probs.values, axis=1)]


# ---------------------------------------------------------------------------
# one seed
# ---------------------------------------------------------------------------

def run_seed(config: ExperimentConfig, seed: int,
             keep_artifacts: bool = False) -> SeedOutcome:
    """Train one seed end to end; non-finite losses abort the seed."""
    try:
        return _run_seed_inner(config, seed, keep_artifacts)
    except (NonFiniteError, FloatingPointError, OverflowError) as exc:
        return SeedOutcome(seed=seed, status="aborted", abort_reason=str(exc))


def _run_seed_inner(config: ExperimentConfig, seed: int,
                    keep_artifacts: bool) -> SeedOutcome:
    sc = config.scenario
    train_cfg = config.train
    data_ss, scen_ss, model_ss, batch_ss, memory_ss, mix_ss = \
        np.random.SeedSequence(seed).spawn(6)
    dataset = _load_dataset(config, data_ss)
    scenario = build_scenario(dataset, sc.n_tasks, sc.classes_per_task, sc.mode,
                              train_cfg.support_size, scen_ss, sc.grouping)
    model = MultiHeadModel(_model_config(config, dataset.input_dim), seed=model_ss)
    store = CentroidStore()
    memory = ReplayMemory(train_cfg.memory_capacity, seed=memory_ss) \
        if _uses_memory(config) else None
    batch_rng = np.random.default_rng(batch_ss)
    mix_rng = np.random.default_rng(mix_ss)
    snapshot: MultiHeadModel | None = None
    matrix = ResultsMatrix(sc.n_tasks)
    runtime = RuntimeLog()
    cil_rule = _cil_rule(config)
    is_cil = sc.mode == "cil"
    last_epoch_regs: list[float] = []

    for t in range(sc.n_tasks):
        task = scenario.train_split(t)
        support_x, support_y = scenario.support_set(t)
        model.add_task(t, with_projection=is_cil and config.strategy == "cm")
        opt = SGD(model.parameter_tensors(), lr=train_cfg.lr,
                  momentum=train_cfg.momentum)
        if config.strategy == "cumulative":
            pool_x, pool_y, pool_t = cumulative_dataset(scenario, t)
        started = time.perf_counter()
        for epoch in range(train_cfg.epochs):
            collecting = t == sc.n_tasks - 1 and epoch == train_cfg.epochs - 1
            if config.strategy == "cumulative":
                order = batch_rng.permutation(len(pool_y))
                for lo in range(0, len(order), train_cfg.batch_size):
                    idx = order[lo:lo + train_cfg.batch_size]
                    cumulative_step(model, pool_x[idx], pool_y[idx], pool_t[idx],
                                    scenario, train_cfg, opt)
                continue
            order = batch_rng.permutation(len(task.train_y))
            for lo in range(0, len(order), train_cfg.batch_size):
                idx = order[lo:lo + train_cfg.batch_size]
                bx = task.train_x[idx]
                by_local = task.train_y[idx]
                if config.strategy == "naive":
                    result = naive_step(model, bx, by_local, support_x, support_y,
                                        task, train_cfg, opt)
                elif config.strategy == "er":
                    mixed = _mix_or_plain(memory, bx, by_local, task, train_cfg, mix_rng)
                    result = er_step(model, mixed, support_x, support_y, task,
                                     store, train_cfg, opt)
                elif is_cil:  # cm, class-incremental
                    mixed = _mix_or_plain(memory, bx, by_local, task, train_cfg, mix_rng)
                    result = cil_training_step(model, snapshot, mixed, support_x,
                                               support_y, task, store, train_cfg, opt)
                else:  # cm, task-incremental
                    result = til_training_step(model, snapshot, bx, by_local,
                                               support_x, support_y, task,
                                               train_cfg, opt)
                if collecting and result.regularizer is not None:
                    last_epoch_regs.append(result.regularizer)
        snapshot = finalize_task(model, task, support_x, support_y, store,
                                 memory=memory)
        runtime.record(t, time.perf_counter() - started)
        scenario.complete_task(t)

        for j in range(t + 1):
            test_x, test_y_local = scenario.test_split(j)
            truth = test_y_local + scenario.tasks[j].label_offset
            if not is_cil:
                pred = predict_til(model, test_x, j, store)
            elif cil_rule == "merged":
                pred = _predict_cil_merged(model, test_x, store, t)
            else:
                pred = predict_cil_taskspace(model, test_x, store, t)
            matrix.record(t, j, float(np.mean(pred == truth)))

    outcome = SeedOutcome(seed=seed, status="ok", matrix=matrix, runtime=runtime)
    outcome.accuracy = matrix.accuracy()
    if sc.n_tasks > 1:
        outcome.bwt = matrix.bwt()
        outcome.bwt_defined = True
    else:
        outcome.bwt = 0.0  # undefined for one task; flagged via bwt_defined
        outcome.bwt_defined = False
    if last_epoch_regs:
        outcome.final_regularizer = float(np.mean(last_epoch_regs))
    outcome.memory_scalars = _memory_scalars(config, model, store, memory, scenario)
    if keep_artifacts:
        outcome.artifacts = SeedArtifacts(model=model, store=store, scenario=scenario)
    return outcome


def _mix_or_plain(memory: ReplayMemory | None, bx, by_local, task, train_cfg,
                  mix_rng) -> MixedBatch:
    by_global = by_local + task.label_offset
    if memory is None or len(memory) == 0:
        return MixedBatch(x=bx, y=by_global,
                          task_ids=np.full(len(bx), task.task_id, dtype=np.int64),
                          n_current=len(bx))
    return sample_mixed_batch(memory, bx, by_global, task.task_id,
                              train_cfg.mix_fraction, mix_rng)


def _memory_scalars(config: ExperimentConfig, model: MultiHeadModel,
                    store: CentroidStore, memory: ReplayMemory | None,
                    scenario: Scenario) -> int:
    """Additional scalars held between tasks, from the actual run state."""
    input_dim = scenario.tasks[0].train_x.shape[1]
    total = 0
    if config.strategy in ("cm", "er"):
        n_classes = sum(task.n_classes for task in scenario.tasks)
        total += memory_footprint("cm_til", embedding_dim=model.config.embedding_dim,
                                  n_classes=n_classes)
    if memory is not None:
        total += input_dim * len(memory)
    if config.strategy == "cumulative":
        total += input_dim * sum(len(task.train_y) for task in scenario.tasks)
    return total


# ---------------------------------------------------------------------------
# experiment and sweep drivers
# ---------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig,
                   keep_artifacts: bool = False) -> ExperimentResult:
    """Run every seed, then write records, matrices, and the aggregate table."""
    outcomes = [run_seed(config, seed, keep_artifacts=keep_artifacts)
                for seed in config.seeds]
    result = ExperimentResult(config=config, outcomes=outcomes)
    _write_experiment(result)
    return result


def _config_echo(config: ExperimentConfig) -> dict:
    echo = {
        "scenario": asdict(config.scenario),
        "model": asdict(config.model),
        "train": asdict(config.train),
        "strategy": config.strategy,
        "seeds": list(config.seeds),
        "out_dir": config.out_dir,
        "save_models": config.save_models,
        "cil_eval": config.cil_eval,
    }
    return echo


def _seed_record(config: ExperimentConfig, outcome: SeedOutcome) -> dict:
    record = {
        "seed": outcome.seed,
        "status": outcome.status,
        "abort_reason": outcome.abort_reason,
        "strategy": config.strategy,
        "mode": config.scenario.mode,
        "accuracy": outcome.accuracy,
        "bwt": outcome.bwt,
        "bwt_defined": outcome.bwt_defined,
        "final_regularizer": outcome.final_regularizer,
        "memory_scalars": outcome.memory_scalars,
        "r_matrix": None,
        "config": _config_echo(config),
    }
    if outcome.matrix is not None:
        arr = outcome.matrix.as_array()
        record["r_matrix"] = [[None if math.isnan(v) else v for v in row]
                              for row in arr.tolist()]
    return record


def _write_experiment(result: ExperimentResult) -> None:
    out = Path(result.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for outcome in result.outcomes:
        record = _seed_record(result.config, outcome)
        path = out / f"seed_{outcome.seed}.json"
        path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
        if outcome.matrix is not None:
            outcome.matrix.save_text(str(out / f"r_matrix_seed{outcome.seed}.txt"))
        if outcome.artifacts is not None:
            outcome.artifacts.store.save_text(str(out / f"centroids_seed{outcome.seed}.tsv"))
            if result.config.save_models:
                outcome.artifacts.model.save(str(out / f"model_seed{outcome.seed}.bin"))
    _write_aggregate(result, out / "aggregate.txt")
    timing_lines = ["seed\ttask\tseconds"]
    for outcome in result.outcomes:
        for task_id, seconds in outcome.runtime.items():
            timing_lines.append(f"{outcome.seed}\t{task_id}\t{seconds:.6f}")
    (out / "timing.txt").write_text("\n".join(timing_lines) + "\n")


def _write_aggregate(result: ExperimentResult, path: Path) -> None:
    agg = result.aggregate()
    lines = ["metric\tvalue"]
    for key in sorted(agg):
        value = agg[key]
        lines.append(f"{key}\t{value!r}" if isinstance(value, float)
                     else f"{key}\t{value}")
    path.write_text("\n".join(lines) + "\n")


def _axis_override(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "lambda":
        train = replace(config.train, reg_weight=float(value))
    elif axis == "support_size":
        train = replace(config.train, support_size=int(value))
    elif axis == "memory_capacity":
        train = replace(config.train, memory_capacity=int(value))
    elif axis == "merging_variant":
        train = replace(config.train, merging_variant=str(value))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")
    sub_dir = str(Path(config.out_dir) / f"{axis}_{value}")
    return replace(config, train=train, out_dir=sub_dir)


def run_sweep(config: ExperimentConfig, axis: str, values: list) -> list[dict]:
    """One experiment per axis value; writes a comparison table."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep requires at least one value")
    rows = []
    for value in values:
        sub = _axis_override(config, axis, value)
        result = run_experiment(sub)
        agg = result.aggregate()
        rows.append({"axis": axis, "value": value, **agg})
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["value", "n_seeds", "aborted_seeds", "accuracy_mean", "accuracy_std",
               "bwt_mean", "bwt_std", "final_regularizer_mean"]
    lines = ["\t".join([axis] + columns[1:])]
    for row in rows:
        cells = [str(row["value"])]
        for col in columns[1:]:
            value = row.get(col)
            cells.append("" if value is None else
                         (repr(value) if isinstance(value, float) else str(value)))
        lines.append("\t".join(cells))
    (out / "sweep.txt").write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def export_embeddings(config: ExperimentConfig, seed: int, out_dir: str,
                      task_id: int | None = None) -> list[str]:
    """Train one seed, project embeddings (and centroids) to 2-d, write rows.

    Task-incremental runs export one file per task space (or the requested
    one); class-incremental runs export the merged space. Row format:
    ``task_id<TAB>global_class<TAB>is_centroid<TAB>x<TAB>y``.
    """
    outcome = run_seed(config, seed, keep_artifacts=True)
    if outcome.status != "ok":
        raise RuntimeError(f"seed {seed} aborted: {outcome.abort_reason}")
    art = outcome.artifacts
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    if config.scenario.mode == "til":
        tasks = [task_id] if task_id is not None else list(range(art.scenario.n_tasks))
        for t in tasks:
            path = out / f"embeddings_task{t}_seed{seed}.txt"
            _export_task_space(art, t, str(path))
            written.append(str(path))
    else:
        path = out / f"embeddings_merged_seed{seed}.txt"
        _export_merged_space(art, str(path))
        written.append(str(path))
    return written


def _export_rows(path: str, rows: list[tuple[int, int, int]], coords: np.ndarray) -> None:
    lines = ["task_id\tglobal_class\tis_centroid\tx\ty"]
    for (tid, cls, is_cent), (x, y) in zip(rows, coords):
        lines.append(f"{tid}\t{cls}\t{is_cent}\t{x!r}\t{y!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _export_task_space(art: SeedArtifacts, task_id: int, path: str) -> None:
    model, store, scenario = art.model, art.store, art.scenario
    test_x, test_y_local = scenario.test_split(task_id)
    task = scenario.tasks[task_id]
    model.apply_norm_stats(task_id)
    emb = model.embed(test_x, task_id, train=False).values
    cents, classes = store.matrix(task_id)
    data = np.concatenate([emb, cents])
    rows = [(task_id, int(task.label_offset + y), 0) for y in test_y_local]
    rows += [(task_id, int(c), 1) for c in classes]
    components, _, mean = principal_components(data)
    _export_rows(path, rows, project_2d(data, components, mean))


def _export_merged_space(art: SeedArtifacts, path: str) -> None:
    from .core import merged_space  # local import avoids a cycle at module load

    model, store, scenario = art.model, art.store, art.scenario
    model.reset_eval_stats()
    upto = scenario.n_tasks - 1
    blocks: list[np.ndarray] = []
    rows: list[tuple[int, int, int]] = []
    for task in scenario.tasks:
        test_x, test_y_local = scenario.test_split(task.task_id)
        z, _, _ = merged_space(model, test_x, upto, store)
        blocks.append(z.values)
        rows += [(task.task_id, int(task.label_offset + y), 0) for y in test_y_local]
    # projected centroids of every task, in the same shared space
    some_x = scenario.tasks[0].test_x[:1]
    _, cents, classes = merged_space(model, some_x, upto, store)
    blocks.append(cents.values)
    class_task = {c: t.task_id for t in scenario.tasks for c in t.classes}
    rows += [(class_task[c], int(c), 1) for c in classes]
    data = np.concatenate(blocks)
    components, _, mean = principal_components(data)
    _export_rows(path, rows, project_2d(data, components, mean))
