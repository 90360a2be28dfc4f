"""Shared fixtures for the object-centric toolkit tests."""

import pytest

from backbone import BackboneConfig
from grouping import GroupingConfig
from heads import HeadsConfig
from model import ModelConfig
from ocl_utils import SCHEMA_VERSION, write_json
from scenegen import AugmentConfig, GeneratorSpec, generate_scenes, save_dataset


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    """Point OCL_RUN_ROOT at a temporary directory."""
    root = tmp_path / "runs"
    monkeypatch.setenv("OCL_RUN_ROOT", str(root))
    return root


@pytest.fixture
def tiny_spec():
    return GeneratorSpec(image_size=32, min_objects=1, max_objects=3, num_queries=5)


@pytest.fixture
def tiny_samples(tiny_spec):
    return generate_scenes(tiny_spec, 8, base_seed=0)


@pytest.fixture
def tiny_dataset_dir(tmp_path, tiny_samples, tiny_spec):
    """8 scenes on disk: 4 train, 1 val, 2 probe, 1 test."""
    root = tmp_path / "data"
    save_dataset(tiny_samples, root, {"train": 4, "val": 1, "probe": 2, "test": 1}, tiny_spec.vocabulary())
    return root


@pytest.fixture
def tiny_augment():
    return AugmentConfig(output_size=16)


def make_model_cfg(variant="slot", dim=16, num_queries=4, use_cls_token=False, proj_dim=None) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(
            image_size=16, patch_size=4, embed_dim=dim, num_layers=1, num_heads=2,
            mlp_hidden=2 * dim, use_cls_token=use_cls_token, pos_grid=4,
        ),
        grouping=GroupingConfig(variant=variant, num_queries=num_queries, num_heads=2, layers=1),
        heads=HeadsConfig(object_proj_dim=proj_dim or dim, global_repr_dim=dim, global_proj_dim=dim),
    )


@pytest.fixture
def model_cfg():
    """Factory for small model configs (D=16, 16×16 images, K=4)."""
    return make_model_cfg


@pytest.fixture
def tiny_model_cfg():
    return make_model_cfg()


def fake_report(root, run_id="slot_ctrimg", seed=0, config_hash="aaaaaaaaaaaa", **fields):
    """Write a completed report.json the way run_experiment lays it out."""
    report = {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "config_hash": config_hash,
        "seed": seed,
        "status": "completed",
        "variant": "slot",
        "object_loss": "ctrimg",
        "use_global": True,
        "crop_scale_min": 0.3,
        "crop_scale_max": 1.0,
        "iou": 0.5,
        "ap_object": 0.6,
        "ap_global": 0.4,
    }
    report.update(fields)
    run_dir = root / f"{run_id}-{config_hash}" / f"seed-{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / "report.json", report)
    return run_dir


@pytest.fixture
def write_fake_report():
    """Factory: write_fake_report(root, run_id=..., seed=..., **metrics) → run directory."""
    return fake_report


@pytest.fixture
def tiny_overrides():
    """--set overrides that shrink the smoke preset to a few seconds on a CPU."""
    return [
        "data.num_images=12",
        "data.splits={train: 6, val: 2, probe: 2, test: 2}",
        "data.image_size=32",
        "data.min_objects=1",
        "data.max_objects=3",
        "augment.output_size=16",
        "backbone.image_size=16",
        "backbone.embed_dim=16",
        "backbone.num_layers=1",
        "backbone.num_heads=2",
        "backbone.mlp_hidden=32",
        "backbone.pos_grid=4",
        "grouping.num_queries=4",
        "grouping.num_heads=2",
        "grouping.layers=1",
        "heads.object_proj_dim=16",
        "heads.global_repr_dim=16",
        "heads.global_proj_dim=16",
        "trainer.batch_size=2",
        "trainer.epochs=2",
        "trainer.warmup_epochs=1",
        "trainer.checkpoint_every=0",
        "eval.batch_size=4",
        "eval.probe_steps=5",
        "eval.probe_batch_size=4",
        "eval.num_overlays=1",
    ]
