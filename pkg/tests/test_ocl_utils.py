"""Tests for ocl_utils.py — Tier 1 (pure functions) + Tier 2 (tmp_path fixtures)."""

import json
import random
from pathlib import Path

import numpy as np
import pytest
import torch

import ocl_utils
from ocl_utils import ConfigError


# ============================================================
# Tier 1: validate_safe_id — pure function, zero dependencies
# ============================================================

class TestValidateSafeId:
    """validate_safe_id() should reject path-traversal characters."""

    def test_normal_id(self):
        ocl_utils.validate_safe_id("slot_ctrimg", "run_id")
        ocl_utils.validate_safe_id("base-slot-cossim-crop0.3-1", "run_id")

    def test_dotdot_attack(self):
        with pytest.raises(ConfigError):
            ocl_utils.validate_safe_id("../etc/passwd", "run_id")

    def test_slash_attack(self):
        with pytest.raises(ConfigError):
            ocl_utils.validate_safe_id("runs/other", "run_id")

    def test_backslash_attack(self):
        with pytest.raises(ConfigError):
            ocl_utils.validate_safe_id("runs\\other", "run_id")

    def test_empty_id(self):
        with pytest.raises(ConfigError):
            ocl_utils.validate_safe_id("", "run_id")


# ============================================================
# Tier 1: overrides and merging
# ============================================================

class TestOverrides:
    """--set section.key=value parsing goes through yaml.safe_load."""

    def test_parse_typed_values(self):
        assert ocl_utils.parse_override("trainer.epochs=4") == (["trainer", "epochs"], 4)
        assert ocl_utils.parse_override("losses.temperature=0.5") == (["losses", "temperature"], 0.5)
        assert ocl_utils.parse_override("losses.use_global=false") == (["losses", "use_global"], False)
        assert ocl_utils.parse_override("augment.aspect_ratio_range=[0.5, 2.0]") == (
            ["augment", "aspect_ratio_range"], [0.5, 2.0],
        )

    def test_value_may_contain_equals(self):
        path, value = ocl_utils.parse_override("data.path=a=b")
        assert path == ["data", "path"]
        assert value == "a=b"

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            ocl_utils.parse_override("trainer.epochs")

    def test_key_without_section_rejected(self):
        with pytest.raises(ConfigError):
            ocl_utils.parse_override("epochs=3")

    def test_apply_overrides_in_order(self):
        config = {"trainer": {"epochs": 10}}
        ocl_utils.apply_overrides(config, ["trainer.epochs=3", "trainer.epochs=5", "eval.probe_steps=7"])
        assert config == {"trainer": {"epochs": 5}, "eval": {"probe_steps": 7}}

    def test_apply_override_through_scalar_rejected(self):
        with pytest.raises(ConfigError):
            ocl_utils.apply_overrides({"run_id": "x"}, ["run_id.sub=1"])


# ============================================================
# Tier 1: config hash, ranges
# ============================================================

class TestConfigHash:
    def test_key_order_irrelevant(self):
        a = {"trainer": {"epochs": 2, "batch_size": 8}, "losses": {"temperature": 0.1}}
        b = {"losses": {"temperature": 0.1}, "trainer": {"batch_size": 8, "epochs": 2}}
        assert ocl_utils.config_hash(a) == ocl_utils.config_hash(b)

    def test_run_id_and_seeds_excluded(self):
        a = {"run_id": "one", "seeds": [0], "trainer": {"epochs": 2}}
        b = {"run_id": "two", "seeds": [1, 2], "trainer": {"epochs": 2}}
        assert ocl_utils.config_hash(a) == ocl_utils.config_hash(b)

    def test_value_change_changes_hash(self):
        assert ocl_utils.config_hash({"t": {"e": 2}}) != ocl_utils.config_hash({"t": {"e": 3}})

    def test_integral_float_equals_int(self):
        assert ocl_utils.config_hash({"t": {"e": 2.0}}) == ocl_utils.config_hash({"t": {"e": 2}})

    def test_hash_format(self):
        h = ocl_utils.config_hash({})
        assert len(h) == 12
        int(h, 16)


class TestParseRange:
    def test_inclusive_range(self):
        assert ocl_utils.parse_int_range("0..3") == [0, 1, 2, 3]

    def test_list(self):
        assert ocl_utils.parse_int_range("0,2,5") == [0, 2, 5]

    def test_single(self):
        assert ocl_utils.parse_int_range("7") == [7]

    def test_reversed_range_rejected(self):
        with pytest.raises(ConfigError):
            ocl_utils.parse_int_range("3..1")

    def test_parse_csv_strips(self):
        assert ocl_utils.parse_csv(" slot, cross ,") == ["slot", "cross"]


# ============================================================
# Tier 2: file helpers
# ============================================================

class TestFiles:
    def test_load_yaml_mapping(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("trainer:\n  epochs: 3\n", encoding="utf-8")
        assert ocl_utils.load_yaml(path) == {"trainer": {"epochs": 3}}

    def test_load_yaml_empty_is_empty_dict(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("", encoding="utf-8")
        assert ocl_utils.load_yaml(path) == {}

    def test_load_yaml_missing(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            ocl_utils.load_yaml(tmp_path / "missing.yaml")

    def test_load_yaml_non_mapping(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="mapping"):
            ocl_utils.load_yaml(path)

    def test_load_yaml_parse_error(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("a: [1, 2\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="parse"):
            ocl_utils.load_yaml(path)

    def test_save_then_load_yaml(self, tmp_path):
        path = tmp_path / "c.yaml"
        ocl_utils.save_yaml(path, {"b": 1, "a": [1, 2]})
        assert ocl_utils.load_yaml(path) == {"b": 1, "a": [1, 2]}

    def test_load_json_corrupt_returns_none(self, tmp_path, capsys):
        path = tmp_path / "r.json"
        path.write_text("{not json", encoding="utf-8")
        assert ocl_utils.load_json(path) is None
        assert "[WARN]" in capsys.readouterr().err

    def test_load_json_missing_returns_none(self, tmp_path):
        assert ocl_utils.load_json(tmp_path / "none.json") is None

    def test_jsonl_append_and_read(self, tmp_path):
        path = tmp_path / "m.jsonl"
        ocl_utils.append_jsonl(path, {"step": 0, "loss": 1.5})
        ocl_utils.append_jsonl(path, {"step": 1, "loss": 1.25})
        assert [r["step"] for r in ocl_utils.read_jsonl(path)] == [0, 1]
        first = path.read_text(encoding="utf-8").splitlines()[0]
        assert json.loads(first) == {"loss": 1.5, "step": 0}

    def test_read_jsonl_missing(self, tmp_path):
        assert ocl_utils.read_jsonl(tmp_path / "none.jsonl") == []


class TestRunRoot:
    def test_default(self, monkeypatch):
        monkeypatch.delenv("OCL_RUN_ROOT", raising=False)
        assert ocl_utils.get_run_root() == Path("runs")

    def test_env_override(self, monkeypatch, tmp_path):
        monkeypatch.setenv("OCL_RUN_ROOT", str(tmp_path))
        assert ocl_utils.get_run_root() == tmp_path


# ============================================================
# Tier 1: RNG bookkeeping
# ============================================================

class TestRngState:
    def test_restore_replays_draws(self):
        ocl_utils.seed_everything(3)
        state = ocl_utils.collect_rng_state()
        first = (random.random(), np.random.rand(), torch.rand(1).item())
        ocl_utils.restore_rng_state(state)
        second = (random.random(), np.random.rand(), torch.rand(1).item())
        assert first == second

    def test_restore_none_is_noop(self):
        ocl_utils.restore_rng_state(None)
        ocl_utils.restore_rng_state({})


class TestErrors:
    def test_hierarchy(self):
        for cls in (ocl_utils.ConfigError, ocl_utils.DatasetError, ocl_utils.PlacementError,
                    ocl_utils.NonFiniteError, ocl_utils.AssignmentError, ocl_utils.ConstantMapError,
                    ocl_utils.SchemaVersionError, ocl_utils.ZeroNormError, ocl_utils.MetricError):
            assert issubclass(cls, ocl_utils.OclError)
        assert issubclass(ocl_utils.DatasetValidationError, ocl_utils.DatasetError)

    def test_diverged_message_names_step_and_checkpoint(self):
        err = ocl_utils.TrainingDivergedError(17, "runs/x/checkpoints/last.pt")
        assert err.step == 17
        assert "17" in str(err) and "last.pt" in str(err)
        assert "none" in str(ocl_utils.TrainingDivergedError(0, None))
