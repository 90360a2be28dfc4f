#!/usr/bin/env python3
"""
ocl_utils.py — shared helpers for the object-centric toolkit scripts

Holds the constants, the exception hierarchy, YAML/JSON loading, run-directory
helpers, override parsing, config hashing and RNG bookkeeping used by
scenegen.py, trainer.py, evalsuite.py, experiment.py and ocl-runner.py.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import torch

try:
    import yaml
except ImportError:
    yaml = None  # type: ignore


# ============================================================
# Constants
# ============================================================

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
DATASET_FORMAT_VERSION = 1

# run root override, e.g. OCL_RUN_ROOT=/data/runs
RUN_ROOT_ENV = "OCL_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_FAILURE = 2

STATUS_COMPLETED = "completed"
STATUS_FAILED = "failed"

SPLIT_NAMES = ("train", "val", "probe", "test")

# artifact file names inside a run directory
METRICS_FILE = "metrics.jsonl"
REPORT_FILE = "report.json"
FAILURE_FILE = "failure.json"
CONFIG_FILE = "config.yaml"
OVERLAY_FILE = "attention-samples.npz"
BEST_CHECKPOINT = "best.pt"


# ============================================================
# Errors
# ============================================================

class OclError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(OclError):
    """Invalid configuration or parameter combination."""


class DatasetError(OclError):
    """Missing or unreadable dataset files."""


class DatasetValidationError(DatasetError):
    """Dataset files readable but inconsistent (e.g. mask/attribute count)."""


class PlacementError(OclError):
    """Scene generator could not place objects within max_retries attempts."""


class NonFiniteError(OclError):
    """NaN/Inf activations; the message names the offending layer."""


class AssignmentError(OclError):
    """Invalid cost matrix for bipartite matching."""


class ZeroNormError(OclError):
    """Cosine similarity requested for a zero-norm vector."""


class ConstantMapError(OclError):
    """Otsu threshold requested for a constant-valued map."""


class MetricError(OclError):
    """Metric undefined for the given inputs (e.g. AP without positives)."""


class TrainingDivergedError(OclError):
    """Non-finite training loss."""

    def __init__(self, step: int, last_checkpoint: str | None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"non-finite loss at step {step} (last good checkpoint: {last_checkpoint or 'none'})"
        )


class SchemaVersionError(OclError):
    """Run artifacts written with incompatible schema versions."""


# ============================================================
# Console output
# ============================================================

def info(msg: str) -> None:
    print(f"  [INFO] {msg}")


def warn(msg: str) -> None:
    print(f"  [WARN] {msg}", file=sys.stderr)


def error(msg: str) -> None:
    print(f"[ERROR] {msg}", file=sys.stderr)


def now_utc() -> str:
    return datetime.now(timezone.utc).isoformat()


# ============================================================
# File loading
# ============================================================

def load_yaml(path: Path) -> dict:
    """Load a YAML mapping. Missing file or non-mapping content raises ConfigError."""
    if yaml is None:
        raise ConfigError("PyYAML is not installed. Run: pip install PyYAML>=6.0")
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML parse failed ({path}): {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level, got {type(data).__name__}")
    return data


def save_yaml(path: Path, data: dict) -> None:
    path.write_text(
        yaml.dump(data, allow_unicode=True, default_flow_style=False, sort_keys=False),
        encoding="utf-8",
    )


def load_json(path: Path) -> dict | None:
    """Load a JSON file; missing or corrupt files return None with a warning."""
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, OSError) as e:
        warn(f"failed to read {path}: {e}")
        return None


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False), encoding="utf-8")


def append_jsonl(path: Path, record: dict) -> None:
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            records.append(json.loads(line))
    return records


# ============================================================
# Ids, run directories, overrides
# ============================================================

def validate_safe_id(value: str, label: str = "id") -> None:
    """Reject ids containing path-traversal characters (.., /, \\)."""
    if not value or ".." in value or "/" in value or "\\" in value:
        raise ConfigError(f"{label} contains illegal characters: {value!r}")


def get_run_root() -> Path:
    """Run root directory. OCL_RUN_ROOT overrides the default ./runs."""
    env_dir = os.environ.get(RUN_ROOT_ENV)
    if env_dir:
        return Path(env_dir)
    return Path(DEFAULT_RUN_ROOT)


def get_repo_dir() -> Path:
    return Path(__file__).resolve().parent.parent


def parse_override(text: str) -> tuple[list[str], Any]:
    """Parse ``section.key=value``; the value goes through yaml.safe_load."""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if len(path) < 2:
        raise ConfigError(f"override key must name a section and a key: {key!r}")
    value = yaml.safe_load(raw) if yaml is not None else raw
    return path, value


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``--set`` overrides in order. Missing intermediate sections are created."""
    for text in overrides:
        path, value = parse_override(text)
        node = config
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
                node[part] = child
            if not isinstance(child, dict):
                raise ConfigError(f"override {text!r}: {part} is not a section")
            node = child
        node[path[-1]] = value
    return config


def _canonical(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def config_hash(config: dict, exclude: tuple[str, ...] = ("run_id", "seeds")) -> str:
    """Stable 12-char hash; independent of key order and of the excluded keys."""
    payload = {k: v for k, v in config.items() if k not in exclude}
    text = json.dumps(_canonical(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def parse_int_range(text: str) -> list[int]:
    """``0..3`` → [0, 1, 2, 3]; ``0,2,5`` → [0, 2, 5]."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        start, stop = int(lo), int(hi)
        if stop < start:
            raise ConfigError(f"empty range: {text}")
        return list(range(start, stop + 1))
    return [int(part) for part in text.split(",") if part.strip()]


def parse_csv(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


# ============================================================
# RNG and fixed-op mode
# ============================================================

def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def set_fixed_ops(enabled: bool) -> None:
    """Fixed-op mode: deterministic kernels, single intra-op thread."""
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if enabled:
        torch.set_num_threads(1)


def collect_rng_state() -> dict[str, Any]:
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }


def restore_rng_state(state: dict[str, Any] | None) -> None:
    if not state:
        return
    if state.get("python") is not None:
        random.setstate(state["python"])
    if state.get("numpy") is not None:
        np.random.set_state(state["numpy"])
    if state.get("torch") is not None:
        torch.set_rng_state(state["torch"])
