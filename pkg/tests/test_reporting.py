"""Tests for reporting.py — Tier 1 (aggregation, tables) + Tier 2 (report files in tmp_path)."""

import json

import numpy as np
import pytest

from ocl_utils import ConfigError, SchemaVersionError, write_json
from reporting import (
    aggregate,
    collect_reports,
    crop_matrices,
    crop_matrix_markdown,
    render_overlay,
    summary_markdown,
    write_report,
)


def crop_grid(root, write_fake_report):
    """slot-ctrimg at three crop settings, two seeds each."""
    settings = [(0.1, 0.5, "h1"), (0.1, 1.0, "h2"), (0.5, 1.0, "h3")]
    for lo, hi, h in settings:
        for seed in (0, 1):
            write_fake_report(root, run_id=f"grid-slot-ctrimg-crop{lo:g}-{hi:g}", seed=seed, config_hash=h,
                              crop_scale_min=lo, crop_scale_max=hi, iou=lo + hi)


# ============================================================
# Tier 1: aggregation
# ============================================================

class TestAggregate:
    def test_mean_and_sample_std(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, seed=0, iou=0.5)
        write_fake_report(tmp_path, seed=1, iou=0.7)
        rows = aggregate(collect_reports([tmp_path]))
        assert len(rows) == 1
        row = rows[0]
        assert row["seeds"] == [0, 1]
        assert not row["single_run"]
        assert row["iou"]["mean"] == pytest.approx(0.6)
        assert row["iou"]["std"] == pytest.approx(0.1414213, abs=1e-6)
        assert row["iou"]["count"] == 2

    def test_single_run_flagged(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, seed=3)
        row = aggregate(collect_reports([tmp_path]))[0]
        assert row["single_run"]
        assert row["iou"]["std"] == 0.0
        assert row["seeds"] == [3]

    def test_groups_by_config_hash(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, run_id="a", config_hash="h1")
        write_fake_report(tmp_path, run_id="b", config_hash="h2", object_loss="cossim")
        rows = aggregate(collect_reports([tmp_path]))
        assert [r["run_id"] for r in rows] == ["a", "b"]
        assert rows[1]["object_loss"] == "cossim"

    def test_missing_metric(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, ap_object=None, ap_global=None)
        row = aggregate(collect_reports([tmp_path]))[0]
        assert row["ap_object"] == {"mean": None, "std": None, "count": 0}


class TestCollect:
    def test_failed_runs_ignored(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, seed=0)
        write_fake_report(tmp_path, seed=1, status="failed")
        assert len(collect_reports([tmp_path])) == 1

    def test_single_run_directory(self, tmp_path, write_fake_report):
        run_dir = write_fake_report(tmp_path)
        assert collect_reports([run_dir])[0][0] == run_dir

    def test_nothing_completed(self, tmp_path):
        with pytest.raises(ConfigError, match="no completed runs"):
            collect_reports([tmp_path])

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            collect_reports([tmp_path / "nope"])

    def test_mixed_schema_versions(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, seed=0)
        write_fake_report(tmp_path, seed=1, schema_version=99)
        with pytest.raises(SchemaVersionError):
            collect_reports([tmp_path])

    def test_unsupported_schema_version(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, schema_version=0)
        with pytest.raises(SchemaVersionError):
            collect_reports([tmp_path])


class TestTables:
    def test_summary_flags_single_runs(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path)
        text = summary_markdown(aggregate(collect_reports([tmp_path])))
        assert "slot_ctrimg *" in text
        assert "50.0 ± 0.0 (n=1)" in text
        assert "single run" in text

    def test_summary_without_single_runs(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, seed=0)
        write_fake_report(tmp_path, seed=1)
        text = summary_markdown(aggregate(collect_reports([tmp_path])))
        assert "single run" not in text

    def test_crop_matrix(self, tmp_path, write_fake_report):
        crop_grid(tmp_path, write_fake_report)
        matrices = crop_matrices(aggregate(collect_reports([tmp_path])))
        assert list(matrices) == ["grid-slot-ctrimg"]
        entry = matrices["grid-slot-ctrimg"]
        assert entry["crop_min"] == [0.1, 0.5]
        assert entry["crop_max"] == [0.5, 1.0]
        assert entry["iou"][0][0] == pytest.approx(0.6)
        assert entry["iou"][0][1] == pytest.approx(1.1)
        assert entry["iou"][1][0] is None
        assert entry["iou"][1][1] == pytest.approx(1.5)
        text = crop_matrix_markdown(entry, "iou")
        assert "| 0.5 | - | 150.0 |" in text

    def test_single_crop_setting_has_no_matrix(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path)
        assert crop_matrices(aggregate(collect_reports([tmp_path]))) == {}

    def test_objects_only_runs_kept_apart(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, run_id="sweep-slot-ctrimg-crop0.3-1", config_hash="h1", iou=0.40)
        write_fake_report(tmp_path, run_id="sweep-slot-ctrimg-crop0.5-1", config_hash="h2",
                          crop_scale_min=0.5, iou=0.30)
        write_fake_report(tmp_path, run_id="sweep-slot-ctrimg-crop0.3-1", config_hash="h3",
                          use_global=False, iou=0.05)
        matrices = crop_matrices(aggregate(collect_reports([tmp_path])))
        assert list(matrices) == ["sweep-slot-ctrimg"]
        entry = matrices["sweep-slot-ctrimg"]
        assert entry["crop_min"] == [0.3, 0.5]
        assert entry["crop_max"] == [1.0]
        assert entry["iou"][0][0] == pytest.approx(0.40)
        assert entry["iou"][1][0] == pytest.approx(0.30)

    def test_different_sweeps_kept_apart(self, tmp_path, write_fake_report):
        for run_id in ("a-slot-ctrimg", "b-slot-ctrimg"):
            for lo in (0.1, 0.5):
                write_fake_report(tmp_path, run_id=f"{run_id}-crop{lo:g}-1", config_hash=f"{run_id}{lo:g}",
                                  crop_scale_min=lo)
        assert sorted(crop_matrices(aggregate(collect_reports([tmp_path])))) == ["a-slot-ctrimg", "b-slot-ctrimg"]

    def test_cell_filled_twice_warns(self, tmp_path, write_fake_report, capsys):
        write_fake_report(tmp_path, run_id="sweep-slot-ctrimg-crop0.3-1", config_hash="h1", iou=0.40)
        write_fake_report(tmp_path, run_id="sweep-slot-ctrimg-crop0.3-1", config_hash="h9", iou=0.20)
        write_fake_report(tmp_path, run_id="sweep-slot-ctrimg-crop0.5-1", config_hash="h2",
                          crop_scale_min=0.5, iou=0.30)
        entry = crop_matrices(aggregate(collect_reports([tmp_path])))["sweep-slot-ctrimg"]
        assert entry["iou"][0][0] == pytest.approx(0.40)
        err = capsys.readouterr().err
        assert "[WARN]" in err
        assert "h1" in err and "h9" in err


# ============================================================
# Tier 2: report files
# ============================================================

class TestWriteReport:
    def test_files_written(self, tmp_path, write_fake_report):
        runs = tmp_path / "runs"
        crop_grid(runs, write_fake_report)
        out = tmp_path / "summary"
        summary = write_report([runs], out)
        assert summary["num_runs"] == 6
        assert len(summary["rows"]) == 3
        for name in ("summary.json", "summary.md", "iou-bars.png", "ap-bars.png", "crop-matrix-grid-slot-ctrimg.md"):
            assert (out / name).exists(), name
        stored = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert stored["num_runs"] == 6

    def test_overlay_rendered(self, tmp_path, write_fake_report):
        run_dir = write_fake_report(tmp_path / "runs", run_id="ov", seed=2)
        rng = np.random.default_rng(0)
        np.savez_compressed(
            run_dir / "attention-samples.npz",
            images=rng.random((2, 16, 16, 3)),
            labels=rng.integers(0, 3, size=(2, 16, 16)),
            attention=rng.random((2, 4, 4, 4)),
        )
        write_report([tmp_path / "runs"], tmp_path / "out")
        assert (tmp_path / "out" / "overlay-ov-seed2.png").exists()

    def test_render_overlay_directly(self, tmp_path):
        npz = tmp_path / "a.npz"
        np.savez_compressed(npz, images=np.zeros((1, 8, 8, 3)), labels=np.zeros((1, 8, 8), dtype=np.int64),
                            attention=np.ones((1, 3, 2, 2)) / 3)
        out = render_overlay(npz, tmp_path / "a.png")
        assert out.exists() and out.stat().st_size > 0

    def test_corrupt_report_skipped(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, seed=0)
        bad = tmp_path / "broken" / "seed-0"
        bad.mkdir(parents=True)
        (bad / "report.json").write_text("{not json", encoding="utf-8")
        assert len(collect_reports([tmp_path])) == 1

    def test_unknown_status_skipped(self, tmp_path, write_fake_report):
        write_fake_report(tmp_path, seed=0)
        other = tmp_path / "x" / "seed-0"
        other.mkdir(parents=True)
        write_json(other / "report.json", {"status": "running"})
        assert len(collect_reports([tmp_path])) == 1
