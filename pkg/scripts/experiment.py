#!/usr/bin/env python3
"""
experiment.py — experiment configs, datasets and end-to-end runs

Config resolution order: dataclass defaults → preset YAML
(templates/experiments/<name>.yaml or a path) → ``--set section.key=value``
overrides. Unknown sections and keys are rejected, all of them in one error.

Run layout under the run root ($OCL_RUN_ROOT, default ./runs):

    <run_id>-<config_hash>/seed-<n>/config.yaml
                                   /metrics.jsonl
                                   /best.pt, checkpoints/
                                   /report.json          (completed runs only)
                                   /failure.json         (failed runs only)
                                   /attention-samples.npz
    datasets/data-<hash>/                                (generated on first use)
"""

from __future__ import annotations

import dataclasses
import itertools
import shutil
import typing
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from backbone import BackboneConfig
from evalsuite import EvalConfig, evaluate
from grouping import GroupingConfig
from heads import HeadsConfig
from losses import LossConfig
from model import ModelConfig
from ocl_utils import (
    BEST_CHECKPOINT,
    CONFIG_FILE,
    FAILURE_FILE,
    OVERLAY_FILE,
    REPORT_FILE,
    SCHEMA_VERSION,
    SPLIT_NAMES,
    STATUS_COMPLETED,
    STATUS_FAILED,
    ConfigError,
    OclError,
    apply_overrides,
    config_hash,
    get_repo_dir,
    get_run_root,
    info,
    load_json,
    load_yaml,
    now_utc,
    save_yaml,
    validate_safe_id,
    warn,
    write_json,
)
from scenegen import AugmentConfig, GeneratorSpec, SceneDataset, generate_scenes, load_dataset, save_dataset
from trainer import TrainConfig, load_model, train

PRESET_DIR = Path("templates") / "experiments"


@dataclass
class DataConfig:
    path: str | None = None  # existing dataset; None = generate under the run root
    num_images: int = 7000
    base_seed: int = 0
    splits: dict[str, float] = field(
        default_factory=lambda: {"train": 5000, "val": 500, "probe": 1000, "test": 500}
    )
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 6
    max_overlap: float = 0.25
    max_retries: int = 200

    def generator_spec(self, num_queries: int) -> GeneratorSpec:
        return GeneratorSpec(
            image_size=self.image_size,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            num_queries=num_queries,
            max_overlap=self.max_overlap,
            max_retries=self.max_retries,
        )

    def validate(self, num_queries: int = 11) -> list[str]:
        errors: list[str] = []
        if self.num_images < 1:
            errors.append(f"data.num_images must be >= 1: {self.num_images}")
        unknown = [name for name in self.splits if name not in SPLIT_NAMES]
        if unknown:
            errors.append(f"unknown split name(s): {', '.join(unknown)}")
        if any(v < 0 for v in self.splits.values()) or sum(self.splits.values()) <= 0:
            errors.append("split weights must be non-negative with a positive sum")
        if "train" not in self.splits:
            errors.append("data.splits needs a train split")
        errors.extend(self.generator_spec(num_queries).validate())
        return errors


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "augment": AugmentConfig,
    "backbone": BackboneConfig,
    "grouping": GroupingConfig,
    "heads": HeadsConfig,
    "losses": LossConfig,
    "trainer": TrainConfig,
    "eval": EvalConfig,
}
TOP_LEVEL = ("run_id", "seeds", "schema_version")


@dataclass
class ExperimentConfig:
    run_id: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0])
    schema_version: int = SCHEMA_VERSION
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.grouping, self.heads)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def validate(self) -> list[str]:
        errors: list[str] = []
        try:
            validate_safe_id(self.run_id, "run_id")
        except ConfigError as e:
            errors.append(str(e))
        if self.schema_version != SCHEMA_VERSION:
            errors.append(f"schema_version {self.schema_version} not supported (expected {SCHEMA_VERSION})")
        if not self.seeds:
            errors.append("seeds must list at least one seed")
        errors.extend(self.data.validate(self.grouping.num_queries))
        if self.data.path is None:
            for key in ("probe_split", "score_split"):
                split = getattr(self.eval, key)
                if split not in self.data.splits:
                    errors.append(f"eval.{key}={split!r} is not one of data.splits ({', '.join(self.data.splits)})")
        for name in ("augment", "backbone", "grouping", "heads", "losses", "trainer", "eval"):
            errors.extend(f"{name}: {e}" for e in getattr(self, name).validate())
        if self.augment.output_size % self.backbone.patch_size:
            errors.append(
                f"augment.output_size={self.augment.output_size} not divisible by "
                f"backbone.patch_size={self.backbone.patch_size}"
            )
        if self.losses.object_loss == "cossim" and self.heads.object_proj_dim != self.backbone.embed_dim:
            errors.append(
                "cossim compares projections with raw slots: heads.object_proj_dim "
                f"({self.heads.object_proj_dim}) must equal backbone.embed_dim ({self.backbone.embed_dim})"
            )
        if self.grouping.variant == "none":
            if self.losses.object_loss != "none":
                errors.append("grouping variant 'none' has no object tokens: set losses.object_loss=none")
            if not self.backbone.use_cls_token:
                errors.append("grouping variant 'none' needs backbone.use_cls_token=true")
        return errors


def _plain(value: Any) -> Any:
    """Tuples → lists so configs dump as plain YAML/JSON."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(default: Any, value: Any) -> Any:
    """YAML lists become tuples and ints or numeric strings become floats where the default says so."""
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, float) and isinstance(value, str):
        # PyYAML reads 7e-4 (no dot) as a string
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _optional_matches(hint: Any, value: Any) -> bool:
    """``X | None`` fields: None or a value of one of the non-None members."""
    if value is None:
        return True
    kinds = tuple(typing.get_origin(t) or t for t in typing.get_args(hint) if t is not type(None))
    if float in kinds:
        kinds += (int,)
    if isinstance(value, bool) and bool not in kinds:
        return False
    return isinstance(value, kinds)


def _type_matches(default: Any, value: Any, hint: Any = None) -> bool:
    """Values must match the default's type; None defaults are checked against the annotation."""
    if default is None:
        return _optional_matches(hint, value)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config; every unknown or mistyped key is listed in a single ConfigError."""
    unknown = [key for key in raw if key not in SECTIONS and key not in TOP_LEVEL]
    mistyped: list[str] = []
    sections: dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        values = raw.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section {name} must be a mapping, got {type(values).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown.extend(f"{name}.{key}" for key in values if key not in known)
        defaults = cls()
        hints = typing.get_type_hints(cls)
        for key, value in values.items():
            if key not in known:
                continue
            default = getattr(defaults, key)
            if not _type_matches(default, _coerce(default, value), hints[key]):
                expected = type(default).__name__ if default is not None else str(hints[key])
                mistyped.append(f"{name}.{key} (expected {expected}, got {value!r})")
        sections[name] = {key: _coerce(getattr(defaults, key), v) for key, v in values.items() if key in known}
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if mistyped:
        raise ConfigError(f"wrong value type for: {', '.join(mistyped)}")
    top = {key: raw[key] for key in TOP_LEVEL if key in raw}
    if "run_id" in top:
        top["run_id"] = str(top["run_id"])
    if "seeds" in top:
        seeds = top["seeds"]
        top["seeds"] = [int(s) for s in (seeds if isinstance(seeds, list) else [seeds])]
    try:
        return ExperimentConfig(**top, **{name: SECTIONS[name](**values) for name, values in sections.items()})
    except TypeError as e:
        raise ConfigError(f"invalid config: {e}") from e


def preset_path(name: str | Path) -> Path:
    path = Path(name)
    if path.suffix in (".yaml", ".yml") or path.exists():
        return path
    return get_repo_dir() / PRESET_DIR / f"{name}.yaml"


def merge_layer(base: dict, update: dict) -> dict:
    """Overlay one config layer on another.

    Sections merge key by key; a field's value replaces the old one whole,
    mappings such as ``data.splits`` included.
    """
    merged = dict(base)
    for key, value in update.items():
        if key in SECTIONS and isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def load_preset(name: str | Path, seen: tuple[str, ...] = ()) -> dict:
    """Preset mapping with its ``extends:`` chain merged in (parent first)."""
    path = preset_path(name)
    if str(path) in seen:
        raise ConfigError(f"preset extends cycle: {' → '.join(seen + (str(path),))}")
    data = load_yaml(path)
    parent = data.pop("extends", None)
    if parent is None:
        return data
    return merge_layer(load_preset(parent, seen + (str(path),)), data)


def resolve_config(preset: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """defaults → preset → overrides, then validation."""
    raw = ExperimentConfig().to_dict()
    if preset is not None:
        raw = merge_layer(raw, load_preset(preset))
    raw = apply_overrides(raw, list(overrides or []))
    cfg = config_from_dict(raw)
    errors = cfg.validate()
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


# ============================================================
# Datasets
# ============================================================

def generate_dataset(cfg: ExperimentConfig, out_dir: Path) -> SceneDataset:
    spec = cfg.data.generator_spec(cfg.grouping.num_queries)
    info(f"generating {cfg.data.num_images} scenes → {out_dir}")
    samples = generate_scenes(spec, cfg.data.num_images, cfg.data.base_seed)
    save_dataset(samples, out_dir, cfg.data.splits, spec.vocabulary())
    return load_dataset(out_dir)


def ensure_dataset(cfg: ExperimentConfig) -> SceneDataset:
    if cfg.data.path:
        return load_dataset(Path(cfg.data.path))
    data_dir = get_run_root() / "datasets" / f"data-{config_hash({'data': asdict(cfg.data)})}"
    if (data_dir / "manifest.json").exists():
        return load_dataset(data_dir)
    return generate_dataset(cfg, data_dir)


# ============================================================
# Runs
# ============================================================

def run_dir_for(cfg: ExperimentConfig, seed: int) -> Path:
    return get_run_root() / f"{cfg.run_id}-{cfg.hash()}" / f"seed-{seed}"


def is_completed(run_dir: Path) -> bool:
    report = load_json(run_dir / REPORT_FILE)
    return bool(report) and report.get("status") == STATUS_COMPLETED


def _write_failure(run_dir: Path, cfg: ExperimentConfig, seed: int, exc: Exception) -> None:
    record = {
        "schema_version": SCHEMA_VERSION,
        "run_id": cfg.run_id,
        "config_hash": cfg.hash(),
        "seed": seed,
        "status": STATUS_FAILED,
        "error_type": type(exc).__name__,
        "error": str(exc),
        "timestamp": now_utc(),
    }
    for attr in ("step", "last_checkpoint"):
        if hasattr(exc, attr):
            record[attr] = getattr(exc, attr)
    write_json(run_dir / FAILURE_FILE, record)


def evaluate_run(run_dir: Path, cfg: ExperimentConfig, seed: int, dataset: SceneDataset,
                 extra: dict | None = None) -> dict:
    model = load_model(run_dir / BEST_CHECKPOINT, cfg.model)
    metrics, overlays = evaluate(
        model, dataset.split(cfg.eval.probe_split), dataset.split(cfg.eval.score_split),
        dataset.vocabulary, cfg.augment, cfg.eval, seed,
    )
    if overlays:
        np.savez_compressed(run_dir / OVERLAY_FILE, **overlays)
    report = {
        "schema_version": SCHEMA_VERSION,
        "run_id": cfg.run_id,
        "config_hash": cfg.hash(),
        "seed": seed,
        "status": STATUS_COMPLETED,
        "variant": cfg.grouping.variant,
        "object_loss": cfg.losses.object_loss,
        "use_global": cfg.losses.use_global,
        "crop_scale_min": cfg.augment.crop_scale_min,
        "crop_scale_max": cfg.augment.crop_scale_max,
        **(extra or {}),
        **metrics,
        "finished_at": now_utc(),
    }
    write_json(run_dir / REPORT_FILE, report)
    return report


def run_experiment(cfg: ExperimentConfig, seed: int, force: bool = False) -> Path:
    """Generate/load data, train, evaluate; returns the run directory.

    A completed run is never overwritten unless ``force`` is set. Failures
    leave the partial artifacts plus failure.json and re-raise.
    """
    run_dir = run_dir_for(cfg, seed)
    if is_completed(run_dir):
        if not force:
            raise ConfigError(f"run already completed: {run_dir} (use --force to re-run)")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / FAILURE_FILE).unlink(missing_ok=True)
    record = {**cfg.to_dict(), "seeds": [seed]}
    save_yaml(run_dir / CONFIG_FILE, record)

    try:
        dataset = ensure_dataset(cfg)
        trainer_cfg = replace(cfg.trainer, seed=seed)
        result = train(
            dataset.split("train"), dataset.split("val") if dataset.splits.get("val") else [],
            cfg.model, cfg.losses, trainer_cfg, cfg.augment, run_dir, config_record=record,
        )
        evaluate_run(run_dir, cfg, seed, dataset, {
            "steps": result.state.step,
            "best_val_loss": result.state.best_val,
        })
    except Exception as e:
        _write_failure(run_dir, cfg, seed, e)
        raise
    info(f"run completed: {run_dir}")
    return run_dir


def eval_only(run_dir: Path) -> dict:
    """Re-evaluate a trained run from its best checkpoint and stored config."""
    run_dir = Path(run_dir)
    stored = load_yaml(run_dir / CONFIG_FILE)
    cfg = config_from_dict(stored)
    errors = cfg.validate()
    if errors:
        raise ConfigError(f"stored config invalid ({run_dir}):\n  " + "\n  ".join(errors))
    if not (run_dir / BEST_CHECKPOINT).exists():
        raise ConfigError(f"no {BEST_CHECKPOINT} in {run_dir}")
    previous = load_json(run_dir / REPORT_FILE) or {}
    extra = {k: previous[k] for k in ("steps", "best_val_loss") if k in previous}
    return evaluate_run(run_dir, cfg, cfg.seeds[0], ensure_dataset(cfg), extra)


# ============================================================
# Grids
# ============================================================

def crop_pairs(mins: list[float], maxs: list[float]) -> list[tuple[float, float]]:
    """All (min, max) combinations with min < max."""
    return [(lo, hi) for lo in mins for hi in maxs if lo < hi]


def grid_configs(base: ExperimentConfig, attentions: list[str], losses: list[str],
                 crop_mins: list[float] | None = None,
                 crop_maxs: list[float] | None = None) -> list[ExperimentConfig]:
    """One config per (attention, loss[, crop pair]). Attention ``none`` is the global-only
    baseline and ignores the loss list."""
    crops: list[tuple[float, float] | None] = [None]
    if crop_mins or crop_maxs:
        crops = crop_pairs(crop_mins or [base.augment.crop_scale_min], crop_maxs or [base.augment.crop_scale_max])
        if not crops:
            raise ConfigError("crop grid is empty: no (min, max) pair with min < max")

    combos: list[tuple[str, str]] = []
    for attention in attentions:
        if attention == "none":
            combos.append(("none", "none"))
        else:
            combos.extend((attention, loss) for loss in losses)

    configs = []
    for (attention, loss), crop in itertools.product(combos, crops):
        run_id = f"{base.run_id}-{attention}-{loss}"
        cfg = replace(
            base,
            grouping=replace(base.grouping, variant=attention),
            losses=replace(base.losses, object_loss=loss),
            backbone=replace(base.backbone, use_cls_token=attention == "none" or base.backbone.use_cls_token),
        )
        if loss == "cossim":
            cfg = replace(cfg, heads=replace(cfg.heads, object_proj_dim=cfg.backbone.embed_dim))
        if crop is not None:
            cfg = replace(cfg, augment=replace(cfg.augment, crop_scale_min=crop[0], crop_scale_max=crop[1]))
            run_id += f"-crop{crop[0]:g}-{crop[1]:g}"
        cfg = replace(cfg, run_id=run_id)
        errors = cfg.validate()
        if errors:
            raise ConfigError(f"grid entry {run_id} invalid:\n  " + "\n  ".join(errors))
        configs.append(cfg)
    return configs


def run_grid(configs: list[ExperimentConfig], seeds: list[int], force: bool = False) -> tuple[list[Path], list[str]]:
    """Runs every (config, seed) in sequence; completed runs are skipped unless forced."""
    done: list[Path] = []
    failed: list[str] = []
    for cfg in configs:
        for seed in seeds:
            run_dir = run_dir_for(cfg, seed)
            if is_completed(run_dir) and not force:
                info(f"skip completed run: {run_dir}")
                done.append(run_dir)
                continue
            try:
                done.append(run_experiment(cfg, seed, force=force))
            except OclError as e:
                warn(f"{cfg.run_id} seed {seed} failed: {e}")
                failed.append(f"{cfg.run_id}/seed-{seed}")
    return done, failed
