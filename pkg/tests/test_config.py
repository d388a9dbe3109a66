import json

import pytest

from binauralgen.config import ConfigError, RunConfig


class TestRunConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = RunConfig()
        path = tmp_path / "run.json"
        cfg.to_json(path)
        reloaded = RunConfig.from_json(path)
        assert reloaded == cfg

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="optimizer"):
            RunConfig.from_dict({"optimizer": {}})

    def test_unknown_field_rejected_by_name(self):
        with pytest.raises(ConfigError, match="train.warmup"):
            RunConfig.from_dict({"train": {"warmup": 5}})

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError, match="train"):
            RunConfig.from_dict({"train": {"batch_size": 0}})

    def test_overrides(self):
        cfg = RunConfig().with_overrides(
            ["train.batch_size=4", "weights.difference=2.5", 'train.device="cpu"']
        )
        assert cfg.train.batch_size == 4
        assert cfg.weights.difference == 2.5
        assert cfg.train.device == "cpu"

    def test_bad_override_shape_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            RunConfig().with_overrides(["batch_size"])
        with pytest.raises(ConfigError, match="section"):
            RunConfig().with_overrides(["nosection.x=1"])

    def test_snapshot_unwrapping(self, tmp_path):
        cfg = RunConfig().with_overrides(["train.batch_size=3"])
        snapshot = {
            "command": "train",
            "options": {"seed": 1},
            "config": cfg.to_dict(),
        }
        path = tmp_path / "effective_config.json"
        path.write_text(json.dumps(snapshot))
        assert RunConfig.from_json(path).train.batch_size == 3

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.from_json(tmp_path / "nope.json")

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            RunConfig.from_json(path)

    def test_tuple_fields_survive_round_trip(self, tmp_path):
        cfg = RunConfig()
        path = tmp_path / "cfg.json"
        cfg.to_json(path)
        assert RunConfig.from_json(path).frames.mean == cfg.frames.mean
