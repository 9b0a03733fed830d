"""Configuration parsing: defaults, overrides, strict validation."""

import json

import pytest

from centroidcl.config import ConfigError, parse_config


def write_config(tmp_path, payload):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return str(path)


class TestDefaults:
    def test_minimal_config_fills_defaults(self, tmp_path):
        path = write_config(tmp_path, {"scenario": {"mode": "til"}, "strategy": "cm"})
        config = parse_config(path)
        assert config.train.reg_weight == 0.1
        assert config.train.support_size == 100
        assert config.train.memory_capacity == 500
        assert config.train.lr == 0.01
        assert config.train.momentum == 0.9
        assert config.model.embedding_dim == 128
        assert config.seeds == [0, 1, 2]

    def test_no_file_at_all(self):
        config = parse_config(None)
        assert config.strategy == "cm"
        assert config.scenario.n_tasks == 5
        assert config.scenario.classes_per_task == 2


class TestValidation:
    def test_negative_lambda_rejected(self, tmp_path):
        path = write_config(tmp_path, {"train": {"lambda": -1}})
        with pytest.raises(ConfigError, match="reg_weight"):
            parse_config(path)

    def test_unknown_key_rejected_with_location(self, tmp_path):
        path = write_config(tmp_path, {"train": {"lambad": 0.1}})
        with pytest.raises(ConfigError, match="train.lambad"):
            parse_config(path)

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = write_config(tmp_path, {"stratgy": "cm"})
        with pytest.raises(ConfigError, match="stratgy"):
            parse_config(path)

    def test_type_error_reported(self, tmp_path):
        path = write_config(tmp_path, {"train": {"epochs": "ten"}})
        with pytest.raises(ConfigError, match="train.epochs"):
            parse_config(path)

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError, match="scenario.mode"):
            parse_config(None, {"scenario.mode": "both"})

    def test_bad_strategy_rejected(self):
        with pytest.raises(ConfigError, match="strategy"):
            parse_config(None, {"strategy": "ewc"})

    def test_support_must_cover_classes(self):
        with pytest.raises(ConfigError, match="support_size"):
            parse_config(None, {"train.support_size": 1,
                                "scenario.classes_per_task": 2})

    def test_seeds_validated(self):
        with pytest.raises(ConfigError, match="seeds"):
            parse_config(None, {"seeds": [0, 0]})
        with pytest.raises(ConfigError, match="seeds"):
            parse_config(None, {"seeds": []})
        with pytest.raises(ConfigError, match="seeds"):
            parse_config(None, {"seeds": [-1]})

    def test_missing_file_reported(self):
        with pytest.raises(ConfigError, match="not found"):
            parse_config("/nonexistent/config.json")

    def test_invalid_json_reported(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            parse_config(str(path))

    def test_mix_fraction_bounds(self):
        with pytest.raises(ConfigError, match="mix_fraction"):
            parse_config(None, {"train.mix_fraction": 1.0})


class TestOverrides:
    def test_flag_overrides_file_value(self, tmp_path):
        path = write_config(tmp_path, {"train": {"lambda": 0.1}})
        config = parse_config(path, {"train.lambda": 0.75})
        assert config.train.reg_weight == 0.75

    def test_override_types_checked(self, tmp_path):
        path = write_config(tmp_path, {})
        with pytest.raises(ConfigError, match="merging"):
            parse_config(path, {"train.merging_variant": "spiral"})

    def test_mode_and_strategy_overrides(self):
        config = parse_config(None, {"scenario.mode": "cil", "strategy": "er",
                                     "seeds": [5]})
        assert config.scenario.mode == "cil"
        assert config.strategy == "er"
        assert config.seeds == [5]
