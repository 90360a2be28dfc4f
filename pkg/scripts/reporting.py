#!/usr/bin/env python3
"""
reporting.py — aggregate completed runs into tables and figures

Reads every report.json below the given directories, groups runs by config
hash, and writes:

    summary.json / summary.md     mean, sample std and count of IoU / AP per group
    crop-matrix-<group>.md        IoU and AP per crop sweep, indexed by (crop min, crop max)
    iou-bars.png, ap-bars.png     grouped bar charts with std error bars
    overlay-<run>.png             attention maps next to ground-truth labels
"""

from __future__ import annotations

import re
from collections import defaultdict
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ocl_utils import (
    OVERLAY_FILE,
    REPORT_FILE,
    SCHEMA_VERSION,
    STATUS_COMPLETED,
    ConfigError,
    SchemaVersionError,
    info,
    load_json,
    warn,
    write_json,
)

METRICS = ("iou", "ap_object", "ap_global")
GROUP_FIELDS = ("run_id", "config_hash", "variant", "object_loss", "use_global", "crop_scale_min", "crop_scale_max")


def collect_reports(paths: list[Path]) -> list[tuple[Path, dict]]:
    """Completed run reports under ``paths``; all must share the current schema version."""
    found: list[tuple[Path, dict]] = []
    for root in paths:
        root = Path(root)
        if not root.exists():
            raise ConfigError(f"run directory not found: {root}")
        candidates = [root / REPORT_FILE] if (root / REPORT_FILE).exists() else sorted(root.rglob(REPORT_FILE))
        for path in candidates:
            report = load_json(path)
            if report and report.get("status") == STATUS_COMPLETED:
                found.append((path.parent, report))
    if not found:
        raise ConfigError(f"no completed runs under: {', '.join(str(p) for p in paths)}")

    versions = sorted({r.get("schema_version") for _, r in found}, key=str)
    if len(versions) > 1 or versions[0] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"incompatible report schema versions {versions} (this build reads {SCHEMA_VERSION})"
        )
    return found


def _stats(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "count": 0}
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "count": len(arr)}


def aggregate(reports: list[tuple[Path, dict]]) -> list[dict]:
    """One row per config hash with per-metric mean/std/count; single-run rows are flagged."""
    groups: dict[str, list[dict]] = defaultdict(list)
    for _, report in reports:
        groups[report["config_hash"]].append(report)
    rows = []
    for key in sorted(groups, key=lambda k: (groups[k][0]["run_id"], k)):
        members = groups[key]
        row = {name: members[0].get(name) for name in GROUP_FIELDS}
        row["seeds"] = sorted(m["seed"] for m in members)
        row["single_run"] = len(members) == 1
        for metric in METRICS:
            row[metric] = _stats([m[metric] for m in members if m.get(metric) is not None])
        rows.append(row)
    return rows


def _fmt(stat: dict, scale: float = 100.0) -> str:
    if stat["mean"] is None:
        return "-"
    return f"{stat['mean'] * scale:.1f} ± {stat['std'] * scale:.1f} (n={stat['count']})"


def summary_markdown(rows: list[dict]) -> str:
    lines = [
        "| run | attention | loss | global | IoU | AP (objects) | AP (global) |",
        "|-----|-----------|------|--------|-----|--------------|-------------|",
    ]
    for row in rows:
        flag = " *" if row["single_run"] else ""
        lines.append(
            f"| {row['run_id']}{flag} | {row['variant']} | {row['object_loss']} | "
            f"{'yes' if row['use_global'] else 'no'} | {_fmt(row['iou'])} | "
            f"{_fmt(row['ap_object'])} | {_fmt(row['ap_global'])} |"
        )
    if any(row["single_run"] for row in rows):
        lines += ["", "\\* single run: std reported as 0"]
    return "\n".join(lines) + "\n"


_CROP_SUFFIX = re.compile(r"-crop[0-9.e+-]+$")


def crop_group(row: dict) -> str:
    """Crop sweep of a row: run id without the crop suffix, attention, loss and global-loss flag."""
    stem = _CROP_SUFFIX.sub("", row["run_id"])
    tag = f"-{row['variant']}-{row['object_loss']}"
    name = stem if stem.endswith(tag) else stem + tag
    return name if row["use_global"] else name + "-objects-only"


def crop_matrices(rows: list[dict]) -> dict[str, dict]:
    """Crop sweeps with several crop settings → metric matrices over (min, max).

    A cell filled by two config hashes keeps the first and warns.
    """
    by_group: dict[str, list[dict]] = defaultdict(list)
    for row in rows:
        by_group[crop_group(row)].append(row)
    matrices: dict[str, dict] = {}
    for group, members in by_group.items():
        pairs = {(r["crop_scale_min"], r["crop_scale_max"]) for r in members}
        if len(pairs) < 2:
            continue
        mins = sorted({p[0] for p in pairs})
        maxs = sorted({p[1] for p in pairs})
        filled: dict[tuple[int, int], str] = {}
        cells: list[tuple[int, int, dict]] = []
        for r in members:
            i, j = mins.index(r["crop_scale_min"]), maxs.index(r["crop_scale_max"])
            if (i, j) in filled:
                warn(f"crop matrix {group}: ({mins[i]:g}, {maxs[j]:g}) has runs "
                     f"{filled[(i, j)]} and {r['config_hash']}; keeping the first")
                continue
            filled[(i, j)] = r["config_hash"]
            cells.append((i, j, r))
        entry = {"crop_min": mins, "crop_max": maxs}
        for metric in METRICS:
            grid = [[None] * len(maxs) for _ in mins]
            for i, j, r in cells:
                grid[i][j] = r[metric]["mean"]
            entry[metric] = grid
        matrices[group] = entry
    return matrices


def crop_matrix_markdown(entry: dict, metric: str) -> str:
    header = "| min \\ max | " + " | ".join(f"{v:g}" for v in entry["crop_max"]) + " |"
    lines = [header, "|" + "---|" * (len(entry["crop_max"]) + 1)]
    for lo, values in zip(entry["crop_min"], entry[metric]):
        cells = ["-" if v is None else f"{v * 100:.1f}" for v in values]
        lines.append(f"| {lo:g} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ============================================================
# Figures
# ============================================================

def bar_chart(rows: list[dict], metrics: tuple[str, ...], path: Path, ylabel: str) -> Path:
    labels = [f"{r['variant']}\n{r['object_loss']}{'' if r['use_global'] else ' (obj)'}" for r in rows]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows)), 3.5))
    for offset, metric in enumerate(metrics):
        means = [(r[metric]["mean"] or 0.0) * 100 for r in rows]
        stds = [(r[metric]["std"] or 0.0) * 100 for r in rows]
        ax.bar(x + offset * width, means, width, yerr=stds, capsize=3, label=metric)
    ax.set_xticks(x + width * (len(metrics) - 1) / 2)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel(ylabel)
    if len(metrics) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_overlay(npz_path: Path, out_path: Path) -> Path:
    """Rows = images; columns = image, ground-truth labels, one attention map per slot."""
    data = np.load(npz_path)
    images, labels, attention = data["images"], data["labels"], data["attention"]
    n, k = attention.shape[:2]
    fig, axes = plt.subplots(n, k + 2, figsize=(1.2 * (k + 2), 1.2 * n), squeeze=False)
    for row in range(n):
        axes[row, 0].imshow(images[row])
        axes[row, 1].imshow(labels[row], cmap="tab20", interpolation="nearest")
        for slot in range(k):
            axes[row, slot + 2].imshow(attention[row, slot], cmap="viridis", interpolation="nearest")
        for ax in axes[row]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def write_report(run_paths: list[Path], out_dir: Path) -> dict:
    """Aggregate, then write tables and figures to ``out_dir``. Returns the summary."""
    reports = collect_reports(run_paths)
    rows = aggregate(reports)
    matrices = crop_matrices(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = {"schema_version": SCHEMA_VERSION, "num_runs": len(reports), "rows": rows, "crop_matrices": matrices}
    write_json(out_dir / "summary.json", summary)
    (out_dir / "summary.md").write_text(summary_markdown(rows), encoding="utf-8")
    for group, entry in matrices.items():
        text = "".join(f"## {metric}\n\n{crop_matrix_markdown(entry, metric)}\n" for metric in METRICS)
        (out_dir / f"crop-matrix-{group}.md").write_text(text, encoding="utf-8")

    bar_chart(rows, ("iou",), out_dir / "iou-bars.png", "IoU (%)")
    bar_chart(rows, ("ap_object", "ap_global"), out_dir / "ap-bars.png", "AP (%)")
    for run_dir, report in reports:
        npz = run_dir / OVERLAY_FILE
        if npz.exists():
            render_overlay(npz, out_dir / f"overlay-{report['run_id']}-seed{report['seed']}.png")
    single = sum(row["single_run"] for row in rows)
    if single:
        warn(f"{single} group(s) have a single run; std reported as 0")
    info(f"report written: {out_dir} ({len(reports)} runs, {len(rows)} groups)")
    return summary
