#!/usr/bin/env python3
"""
evalsuite.py — segmentation IoU from attention maps and linear-probe VQA

Segmentation: first-layer (cross) / first-iteration (slot) attention rows are
reshaped to the patch grid, upsampled bilinearly to the image size and
binarised one by one with Otsu's threshold. Each ground-truth object (the
background is ignored) is matched to one predicted mask so that the total IoU
is maximal; unmatched predictions are ignored, unmatched ground truth scores 0.

VQA: one binary question per attribute combination, "is there a
(size, colour, texture, shape) object?". The object probe max-pools per-slot
logits; the global probe reads the scene representation r. Scores are
micro-averaged AP over all (question, image) pairs.
"""

from __future__ import annotations

import itertools
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from assignment import hungarian
from model import ObjectCentricModel
from ocl_utils import ConfigError, ConstantMapError, MetricError, warn
from scenegen import AugmentConfig, SceneSample, prepare_view

OTSU_BINS = 256


@dataclass
class EvalConfig:
    batch_size: int = 64
    probe_steps: int = 10_000
    probe_lr: float = 1e-3
    probe_weight_decay: float = 1e-4
    probe_batch_size: int = 256
    max_pos_weight: float = 100.0
    num_overlays: int = 4
    probe_split: str = "probe"
    score_split: str = "test"

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.batch_size < 1 or self.probe_batch_size < 1:
            errors.append("batch sizes must be >= 1")
        if self.probe_steps < 0:
            errors.append(f"probe_steps must be >= 0: {self.probe_steps}")
        if self.probe_lr <= 0:
            errors.append(f"probe_lr must be positive: {self.probe_lr}")
        if self.max_pos_weight < 1:
            errors.append(f"max_pos_weight must be >= 1: {self.max_pos_weight}")
        if self.num_overlays < 0:
            errors.append(f"num_overlays must be >= 0: {self.num_overlays}")
        return errors


@dataclass
class MaskSet:
    masks: np.ndarray  # K×H×W bool; masks may overlap
    source: list[int]  # slot index of each mask
    constant_maps: int = 0


# ============================================================
# Otsu
# ============================================================

def otsu_scores(values: np.ndarray, bins: int = OTSU_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Between-class variance for every inner bin boundary k (lower class = bins < k).

    Returns (scores, edges); scores[k-1] belongs to edges[k]. Splits with an
    empty class score -inf.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise ConstantMapError(f"constant map (value {lo}): Otsu threshold undefined")
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    total = counts.sum()
    c0 = np.cumsum(counts)[:-1].astype(np.float64)
    c1 = total - c0
    m0 = np.cumsum(counts * centers)[:-1]
    m1 = (counts * centers).sum() - m0
    with np.errstate(divide="ignore", invalid="ignore"):
        u0 = m0 / c0
        u1 = m1 / c1
        scores = (c0 / total) * (c1 / total) * (u1 - u0) ** 2
    scores[(c0 == 0) | (c1 == 0)] = -np.inf
    return scores, edges


def otsu_threshold(values: np.ndarray, bins: int = OTSU_BINS) -> float:
    """Threshold maximising between-class variance; binarise with ``values >= t``.

    Boundaries tied with the first maximum over a run of empty bins give the
    same split; the threshold is the middle of that run.
    """
    scores, edges = otsu_scores(values, bins)
    first = int(np.argmax(scores))
    last = first
    while last + 1 < len(scores) and scores[last + 1] == scores[first]:
        last += 1
    return float((edges[first + 1] + edges[last + 1]) / 2.0)


def binarize(values: np.ndarray, bins: int = OTSU_BINS) -> np.ndarray:
    return np.asarray(values) >= otsu_threshold(values, bins)


# ============================================================
# Segmentation
# ============================================================

def extract_masks(attention: torch.Tensor | np.ndarray, grid_shape: tuple[int, int],
                  target_hw: tuple[int, int]) -> MaskSet:
    """K×N attention of one image → K binary masks at ``target_hw``.

    Constant maps become all-zero masks and are counted.
    """
    attn = torch.as_tensor(attention, dtype=torch.float64)
    k = attn.shape[0]
    maps = attn.reshape(1, k, *grid_shape)
    maps = F.interpolate(maps, size=tuple(target_hw), mode="bilinear", align_corners=False)[0].numpy()
    masks = np.zeros((k,) + tuple(target_hw), dtype=bool)
    constant = 0
    for idx in range(k):
        try:
            masks[idx] = binarize(maps[idx])
        except ConstantMapError:
            constant += 1
    return MaskSet(masks=masks, source=list(range(k)), constant_maps=constant)


def iou_matrix(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """M×K IoU between ground-truth and predicted masks; empty unions score 0."""
    g = gt.reshape(gt.shape[0], -1).astype(np.float64)
    p = pred.reshape(pred.shape[0], -1).astype(np.float64)
    intersection = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - intersection
    out = np.zeros_like(intersection)
    np.divide(intersection, union, out=out, where=union > 0)
    return out


def segmentation_iou(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Mean IoU over ground-truth objects after max-total-IoU matching.

    None for images without objects (excluded from averages).
    """
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    m = gt.shape[0]
    if m == 0:
        return None
    if pred.shape[0] == 0:
        return 0.0
    if gt.shape[1:] != pred.shape[1:]:
        raise ConfigError(f"mask size mismatch: gt {gt.shape[1:]} vs pred {pred.shape[1:]}")
    ious = iou_matrix(gt, pred)
    n = max(m, pred.shape[0])
    padded = np.zeros((n, n))
    padded[:m, :pred.shape[0]] = ious
    sigma = hungarian(-padded).sigma
    return float(padded[np.arange(m), sigma[:m]].mean())


def mean_iou(per_image: Sequence[float | None]) -> float | None:
    scored = [v for v in per_image if v is not None]
    return float(np.mean(scored)) if scored else None


# ============================================================
# VQA labels and probes
# ============================================================

def question_index(vocabulary: dict[str, list[str]]) -> list[tuple[str, str, str, str]]:
    """All (size, color, texture, shape) combinations in vocabulary order."""
    return list(itertools.product(
        vocabulary["sizes"], vocabulary["colors"], vocabulary["textures"], vocabulary["shapes"],
    ))


def vqa_labels(attributes: Sequence[Sequence[str]], questions: Sequence[tuple]) -> np.ndarray:
    present = {tuple(a) for a in attributes}
    return np.array([q in present for q in questions], dtype=np.float32)


class ObjectProbe(nn.Module):
    """sigmoid(max_i(W s_i + b)); logits returned, sigmoid applied by ``predict``."""

    def __init__(self, dim: int, num_questions: int):
        super().__init__()
        self.linear = nn.Linear(dim, num_questions)

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        return self.linear(slots).max(dim=1).values


class GlobalProbe(nn.Module):
    def __init__(self, dim: int, num_questions: int):
        super().__init__()
        self.linear = nn.Linear(dim, num_questions)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        return self.linear(r)


@dataclass
class ProbeResult:
    probe: nn.Module
    pos_weight: torch.Tensor
    degenerate: list[int] = field(default_factory=list)  # questions without positives


def positive_weights(labels: torch.Tensor, cap: float) -> tuple[torch.Tensor, list[int]]:
    """Inverse class frequency (neg / pos) per question, capped."""
    pos = labels.sum(dim=0)
    neg = labels.shape[0] - pos
    weight = torch.where(pos > 0, neg / pos.clamp(min=1), torch.full_like(pos, cap))
    degenerate = torch.nonzero(pos == 0).flatten().tolist()
    return weight.clamp(min=1.0, max=cap), degenerate


def train_probe(features: torch.Tensor, labels: torch.Tensor, cfg: EvalConfig, seed: int = 0) -> ProbeResult:
    """Linear probe on frozen features: M×K×D slots → object probe, M×D → global probe."""
    features = features.detach().float()
    labels = labels.float()
    num_questions = labels.shape[1]
    torch.manual_seed(seed)
    if features.dim() == 3:
        probe: nn.Module = ObjectProbe(features.shape[-1], num_questions)
    else:
        probe = GlobalProbe(features.shape[-1], num_questions)
    pos_weight, degenerate = positive_weights(labels, cfg.max_pos_weight)
    if degenerate:
        warn(f"{len(degenerate)} question(s) have no positive probe-training labels; weight clamped")
    loss_fn = nn.BCEWithLogitsLoss(pos_weight=pos_weight)
    optimizer = torch.optim.AdamW(probe.parameters(), lr=cfg.probe_lr, weight_decay=cfg.probe_weight_decay)
    generator = torch.Generator().manual_seed(seed)
    m = features.shape[0]
    for _ in range(cfg.probe_steps):
        idx = torch.randint(m, (min(cfg.probe_batch_size, m),), generator=generator)
        loss = loss_fn(probe(features[idx]), labels[idx])
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    probe.eval()
    return ProbeResult(probe, pos_weight, degenerate)


@torch.no_grad()
def predict(probe: nn.Module, features: torch.Tensor) -> np.ndarray:
    return torch.sigmoid(probe(features.float())).numpy()


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Micro-averaged AP over all flattened (target, prediction) pairs.

    Stable sort by descending score, so ties keep index order.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    if s.shape != y.shape:
        raise MetricError(f"scores and labels differ in size: {s.shape} vs {y.shape}")
    num_pos = int(y.sum())
    if num_pos == 0:
        raise MetricError("average precision undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / num_pos)


# ============================================================
# Frozen-model features
# ============================================================

@dataclass
class Features:
    r: torch.Tensor  # M×D_r
    slots: torch.Tensor | None = None  # M×K×D
    attention: torch.Tensor | None = None  # M×K×N
    grid_shape: tuple[int, int] | None = None


@torch.no_grad()
def extract_features(model: ObjectCentricModel, samples: Sequence[SceneSample], aug: AugmentConfig,
                     batch_size: int = 64, query_seed: int = 0, keep_attention: bool = False) -> Features:
    model.eval()
    rs, slots, attentions = [], [], []
    grid = None
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.stack([prepare_view(s.image, aug) for s in chunk])
        out = model(images, query_seed + start)
        rs.append(out.r)
        grid = out.patches.grid_shape
        if out.slots is not None:
            slots.append(out.slots.slots)
            if keep_attention:
                attentions.append(out.slots.attention)
    return Features(
        r=torch.cat(rs),
        slots=torch.cat(slots) if slots else None,
        attention=torch.cat(attentions) if attentions else None,
        grid_shape=grid,
    )


# ============================================================
# Full evaluation
# ============================================================

def segmentation_scores(features: Features, samples: Sequence[SceneSample]) -> tuple[list[float | None], int]:
    per_image: list[float | None] = []
    constant = 0
    for idx, sample in enumerate(samples):
        masks = extract_masks(features.attention[idx], features.grid_shape, sample.image.shape[:2])
        constant += masks.constant_maps
        gt = np.stack(sample.object_masks) if sample.object_masks else np.zeros((0,) + sample.image.shape[:2], bool)
        per_image.append(segmentation_iou(masks.masks, gt))
    return per_image, constant


def probe_ap(train_x: torch.Tensor, train_y: torch.Tensor, test_x: torch.Tensor, test_y: np.ndarray,
             cfg: EvalConfig, seed: int) -> tuple[float, list[int]]:
    result = train_probe(train_x, train_y, cfg, seed)
    return average_precision(predict(result.probe, test_x), test_y), result.degenerate


def evaluate(model: ObjectCentricModel, probe_samples: Sequence[SceneSample],
             score_samples: Sequence[SceneSample], vocabulary: dict[str, list[str]],
             aug: AugmentConfig, cfg: EvalConfig, seed: int = 0) -> tuple[dict, dict[str, np.ndarray]]:
    """Segmentation IoU and both probes' AP on a frozen model.

    Returns the report fields and attention overlays for the first
    ``num_overlays`` scoring images.
    """
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    if not score_samples:
        raise ConfigError("scoring split is empty")
    questions = question_index(vocabulary)
    score_y = np.stack([vqa_labels(s.attributes, questions) for s in score_samples])
    has_slots = model.grouping is not None

    score_feats = extract_features(model, score_samples, aug, cfg.batch_size, seed, keep_attention=has_slots)
    report: dict = {
        "num_questions": len(questions),
        "num_scored_images": len(score_samples),
        "question_positive_rate": score_y.mean(axis=0).round(6).tolist(),
        "iou": None,
        "iou_images": 0,
        "constant_maps": 0,
        "ap_object": None,
        "ap_global": None,
        "degenerate_questions": [],
    }
    overlays: dict[str, np.ndarray] = {}

    if has_slots:
        per_image, constant = segmentation_scores(score_feats, score_samples)
        report["iou"] = mean_iou(per_image)
        report["iou_images"] = sum(v is not None for v in per_image)
        report["constant_maps"] = constant
        if constant:
            warn(f"{constant} constant attention map(s) produced empty masks")
        n = min(cfg.num_overlays, len(score_samples))
        if n:
            overlays = {
                "images": np.stack([s.image for s in score_samples[:n]]),
                "labels": np.stack([s.label_map() for s in score_samples[:n]]),
                "attention": score_feats.attention[:n].reshape(n, -1, *score_feats.grid_shape).numpy(),
            }

    if not probe_samples or cfg.probe_steps == 0:
        warn("probe split empty or probe_steps=0; VQA scores skipped")
        return report, overlays
    if not score_y.any():
        warn("no positive VQA labels on the scoring split; AP undefined")
        return report, overlays

    probe_feats = extract_features(model, probe_samples, aug, cfg.batch_size, seed)
    probe_y = torch.from_numpy(np.stack([vqa_labels(s.attributes, questions) for s in probe_samples]))
    report["ap_global"], degenerate = probe_ap(probe_feats.r, probe_y, score_feats.r, score_y, cfg, seed)
    if has_slots:
        report["ap_object"], _ = probe_ap(probe_feats.slots, probe_y, score_feats.slots, score_y, cfg, seed)
    report["degenerate_questions"] = degenerate
    return report, overlays
