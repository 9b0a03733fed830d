"""Experiment configuration: JSON file plus command-line overrides.

Unknown keys are rejected, every constraint is checked before any training
starts, and error messages carry the dotted path of the offending field.
Command-line flags take precedence over file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .baselines import STRATEGIES
from .core import TrainConfig
from .nn import MERGING_VARIANTS
from .scenarios import GENERATORS, GROUPINGS, MODES

CIL_EVAL_RULES = ("auto", "merged", "per_task")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ScenarioSettings:
    generator: str = "gaussian_clusters"
    mode: str = "til"
    n_tasks: int = 5
    classes_per_task: int = 2
    train_per_class: int = 500
    test_per_class: int = 100
    input_dim: int = 16
    grouping: str = "sequential"
    spread: float = 2.0        # in-task class separation (gaussians) / ring step
    interference: float = 3.0  # cross-task variance along other tasks' axes
    noise: float = 0.3
    dataset_path: str | None = None
    test_path: str | None = None
    test_fraction: float = 0.2


@dataclass
class ModelSettings:
    backbone_hidden: int = 64
    feature_dim: int = 64
    embedding_dim: int = 128
    head_hidden: int | None = None
    proj_hidden: int | None = None
    normalize: bool = True
    shared_projection: bool = True


@dataclass
class ExperimentConfig:
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    strategy: str = "cm"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "results"
    save_models: bool = False
    cil_eval: str = "auto"


# JSON key -> (section attribute, dataclass field, type)
_SECTION_TYPES = {
    "scenario": ScenarioSettings,
    "model": ModelSettings,
    "train": TrainConfig,
}
# the file and CLI speak "lambda"; the dataclass names it reg_weight
_TRAIN_KEY_ALIASES = {"lambda": "reg_weight"}


def _coerce(path: str, value, target_type):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


_FIELD_TYPES = {
    # fields that admit None or need a type other than their default suggests
    ("scenario", "dataset_path"): str,
    ("scenario", "test_path"): str,
    ("model", "head_hidden"): int,
    ("model", "proj_hidden"): int,
}


def _apply_section(section_name: str, section_obj, data: dict):
    valid = {f.name for f in fields(section_obj)}
    updates = {}
    for key, value in data.items():
        attr = _TRAIN_KEY_ALIASES.get(key, key) if section_name == "train" else key
        if attr not in valid:
            raise ConfigError(f"{section_name}.{key}: unknown key")
        path = f"{section_name}.{key}"
        if value is None:
            if (section_name, attr) in _FIELD_TYPES or attr in ("head_hidden", "proj_hidden"):
                updates[attr] = None
                continue
            raise ConfigError(f"{path}: null is not allowed")
        target = _FIELD_TYPES.get((section_name, attr))
        if target is None:
            # infer from the dataclass default
            for f in fields(section_obj):
                if f.name == attr:
                    target = type(f.default) if f.default is not None else str
        updates[attr] = _coerce(path, value, target)
    return updates


def _validate(config: ExperimentConfig) -> ExperimentConfig:
    sc = config.scenario
    if sc.generator not in GENERATORS:
        raise ConfigError(f"scenario.generator: unknown generator {sc.generator!r}")
    if sc.mode not in MODES:
        raise ConfigError(f"scenario.mode: expected one of {MODES}, got {sc.mode!r}")
    if sc.grouping not in GROUPINGS:
        raise ConfigError(f"scenario.grouping: expected one of {GROUPINGS}")
    for name in ("n_tasks", "classes_per_task", "train_per_class", "test_per_class",
                 "input_dim"):
        if getattr(sc, name) < 1:
            raise ConfigError(f"scenario.{name}: must be >= 1")
    if sc.spread <= 0 or sc.noise <= 0:
        raise ConfigError("scenario.spread and scenario.noise must be > 0")
    if sc.interference < 0:
        raise ConfigError("scenario.interference must be >= 0")
    if not 0.0 < sc.test_fraction < 1.0:
        raise ConfigError("scenario.test_fraction: must be in (0, 1)")

    try:
        # re-run the dataclass checks with the final values
        config.train = replace(config.train)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    if config.train.support_size < sc.classes_per_task:
        raise ConfigError(
            f"train.support_size: {config.train.support_size} cannot cover "
            f"{sc.classes_per_task} classes with one sample each")
    if sc.dataset_path is None and \
            config.train.support_size >= sc.train_per_class * sc.classes_per_task:
        raise ConfigError("train.support_size: must be smaller than the per-task train size")

    for name in ("backbone_hidden", "feature_dim", "embedding_dim"):
        if getattr(config.model, name) < 1:
            raise ConfigError(f"model.{name}: must be >= 1")
    for name in ("head_hidden", "proj_hidden"):
        value = getattr(config.model, name)
        if value is not None and value < 1:
            raise ConfigError(f"model.{name}: must be >= 1")

    if config.strategy not in STRATEGIES:
        raise ConfigError(f"strategy: expected one of {STRATEGIES}, got {config.strategy!r}")
    if config.cil_eval not in CIL_EVAL_RULES:
        raise ConfigError(f"cil_eval: expected one of {CIL_EVAL_RULES}")
    if not config.seeds:
        raise ConfigError("seeds: at least one seed is required")
    if any((not isinstance(s, int)) or isinstance(s, bool) or s < 0 for s in config.seeds):
        raise ConfigError("seeds: must be nonnegative integers")
    if len(set(config.seeds)) != len(config.seeds):
        raise ConfigError("seeds: duplicates are not allowed")
    return config


def parse_config(path: str | None = None,
                 overrides: dict[str, object] | None = None) -> ExperimentConfig:
    """Build a validated configuration from a JSON file and/or overrides.

    ``overrides`` uses dotted keys (``"train.lambda"``, ``"scenario.mode"``,
    ``"strategy"``) and wins over file values.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")

    merged: dict = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for dotted, value in (overrides or {}).items():
        if "." in dotted:
            section, key = dotted.split(".", 1)
            merged.setdefault(section, {})
            if not isinstance(merged[section], dict):
                raise ConfigError(f"{section}: expected an object")
            merged[section][key] = value
        else:
            merged[dotted] = value

    config = ExperimentConfig()
    for section_name, section_type in _SECTION_TYPES.items():
        data = merged.pop(section_name, {})
        if not isinstance(data, dict):
            raise ConfigError(f"{section_name}: expected an object")
        updates = _apply_section(section_name, getattr(config, section_name), data)
        if section_name == "train":
            base = {f.name: getattr(config.train, f.name) for f in fields(TrainConfig)}
            base.update(updates)
            try:
                config.train = TrainConfig(**base)
            except ValueError as exc:
                raise ConfigError(f"train: {exc}") from exc
        else:
            setattr(config, section_name,
                    replace(getattr(config, section_name), **updates))

    for key in ("strategy", "out_dir", "cil_eval"):
        if key in merged:
            setattr(config, key, _coerce(key, merged.pop(key), str))
    if "save_models" in merged:
        config.save_models = _coerce("save_models", merged.pop("save_models"), bool)
    if "seeds" in merged:
        seeds = merged.pop("seeds")
        if not isinstance(seeds, list):
            raise ConfigError("seeds: expected a list of integers")
        config.seeds = [
            _coerce(f"seeds[{i}]", s, int) for i, s in enumerate(seeds)]
    if merged:
        raise ConfigError(f"{sorted(merged)[0]}: unknown key")
    return _validate(config)
