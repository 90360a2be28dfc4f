#!/usr/bin/env python3
"""
trainer.py — AdamW loop with warmup + cosine schedule, checkpoints, validation

Run directory contents written here:

    metrics.jsonl                 one record per step ("train") and per epoch ("val")
    checkpoints/step-000500.pt    every ``checkpoint_every`` steps
    checkpoints/last.pt           end of every epoch and on early stop
    best.pt                       lowest validation loss so far

Every random draw is derived from (seed, epoch, sample index) or restored from
the checkpoint, so a resumed run continues exactly where the saved one stopped.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from losses import BatchProjections, LossConfig, total_loss
from model import ModelConfig, ModelOutput, ObjectCentricModel
from ocl_utils import (
    BEST_CHECKPOINT,
    CHECKPOINT_VERSION,
    METRICS_FILE,
    ConfigError,
    SchemaVersionError,
    TrainingDivergedError,
    append_jsonl,
    collect_rng_state,
    info,
    now_utc,
    restore_rng_state,
    seed_everything,
    set_fixed_ops,
    warn,
)
from scenegen import AugmentConfig, SceneSample, augment

CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.pt"


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    warmup_epochs: int = 2
    lr_peak: float = 7e-4
    lr_final: float = 3e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0  # global norm; 0 disables clipping
    seed: int = 0
    checkpoint_every: int = 500
    deterministic: bool = False
    max_steps: int | None = None  # stop early (absolute step count)

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1: {self.batch_size}")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1: {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            errors.append(f"warmup_epochs must satisfy 0 <= warmup < epochs: {self.warmup_epochs}")
        if not self.lr_peak >= self.lr_final > 0:
            errors.append(f"need lr_peak >= lr_final > 0: ({self.lr_peak}, {self.lr_final})")
        if self.weight_decay < 0 or self.grad_clip < 0:
            errors.append("weight_decay and grad_clip must be non-negative")
        if self.checkpoint_every < 0:
            errors.append(f"checkpoint_every must be >= 0: {self.checkpoint_every}")
        if self.max_steps is not None and self.max_steps < 0:
            errors.append(f"max_steps must be >= 0: {self.max_steps}")
        return errors


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    best_val: float | None = None
    last_checkpoint: str | None = None
    rng: dict[str, Any] = field(default_factory=dict)


@dataclass
class TrainResult:
    model: ObjectCentricModel
    state: TrainState
    run_dir: Path
    finished: bool


# ============================================================
# Schedule
# ============================================================

def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    """Incomplete trailing batches are dropped; tiny splits still give one step."""
    return max(1, num_samples // batch_size)


def lr_schedule(step: int, cfg: TrainConfig, per_epoch: int) -> float:
    """Linear 0 → peak over the warmup epochs, then cosine from peak to final."""
    warm = cfg.warmup_epochs * per_epoch
    total = cfg.epochs * per_epoch
    if step < warm:
        return cfg.lr_peak * step / warm
    t = min(max((step - warm) / max(total - warm, 1), 0.0), 1.0)
    w = (1.0 + math.cos(math.pi * t)) / 2.0
    return w * cfg.lr_peak + (1.0 - w) * cfg.lr_final


# ============================================================
# Batches
# ============================================================

def augment_seed(seed: int, epoch: int, index: int, stream: int = 0) -> int:
    """Per-sample augmentation seed; stream 0 = training, 1 = validation."""
    return int(np.random.SeedSequence([seed, stream, epoch, index]).generate_state(1)[0])


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


def make_views(samples: Sequence[SceneSample], seeds: Sequence[int],
               aug: AugmentConfig) -> tuple[torch.Tensor, torch.Tensor]:
    pairs = [augment(sample, aug, s) for sample, s in zip(samples, seeds)]
    return torch.stack([p.view0 for p in pairs]), torch.stack([p.view1 for p in pairs])


def batch_projections(out0: ModelOutput, out1: ModelOutput) -> BatchProjections:
    if out0.slots is None:
        return BatchProjections.from_views((out0.p_global, out1.p_global))
    return BatchProjections.from_views(
        (out0.p_global, out1.p_global),
        (out0.p_obj, out1.p_obj),
        (out0.slots.slots, out1.slots.slots),
    )


def compute_loss(model: ObjectCentricModel, view0: torch.Tensor, view1: torch.Tensor,
                 loss_cfg: LossConfig, query_seed: int | None = None) -> tuple[torch.Tensor, dict]:
    out0 = model(view0, query_seed)
    out1 = model(view1, None if query_seed is None else query_seed + 1)
    return total_loss(batch_projections(out0, out1), loss_cfg)


def grad_norm(parameters) -> float:
    norms = [p.grad.detach().norm(2) for p in parameters if p.grad is not None]
    if not norms:
        return 0.0
    return float(torch.norm(torch.stack(norms), 2))


# ============================================================
# Checkpoints
# ============================================================

def save_checkpoint(path: Path, model: ObjectCentricModel, optimizer: torch.optim.Optimizer | None,
                    state: TrainState, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state.rng = collect_rng_state()
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "state": asdict(state),
        "model_state_dict": model.state_dict(),
        "config": config or {},
    }
    if optimizer is not None:
        payload["optim_state_dict"] = optimizer.state_dict()
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise SchemaVersionError(
            f"checkpoint version {version} in {path} (this build reads {CHECKPOINT_VERSION})"
        )
    return payload


def load_model(path: Path, model_cfg: ModelConfig) -> ObjectCentricModel:
    model = ObjectCentricModel(model_cfg)
    model.load_state_dict(load_checkpoint(path)["model_state_dict"])
    model.eval()
    return model


def build_optimizer(model: ObjectCentricModel, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=0.0, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay,
    )


# ============================================================
# Loop
# ============================================================

@torch.no_grad()
def validation_loss(model: ObjectCentricModel, samples: Sequence[SceneSample], aug: AugmentConfig,
                    loss_cfg: LossConfig, cfg: TrainConfig) -> dict[str, float | None] | None:
    """Sample-weighted mean of the loss terms on fixed validation views."""
    if not samples:
        return None
    was_training = model.training
    model.eval()
    totals: dict[str, float] = {}
    count = 0
    for start in range(0, len(samples), cfg.batch_size):
        chunk = samples[start:start + cfg.batch_size]
        seeds = [augment_seed(cfg.seed, 0, start + i, stream=1) for i in range(len(chunk))]
        view0, view1 = make_views(chunk, seeds, aug)
        _, breakdown = compute_loss(model, view0, view1, loss_cfg, query_seed=cfg.seed + start)
        for key in ("loss", "loss_global", "loss_object"):
            if breakdown.get(key) is not None:
                totals[key] = totals.get(key, 0.0) + breakdown[key] * len(chunk)
        count += len(chunk)
    model.train(was_training)
    result: dict[str, float | None] = {"loss_global": None, "loss_object": None}
    result.update({key: value / count for key, value in totals.items()})
    return result


def train(train_samples: Sequence[SceneSample], val_samples: Sequence[SceneSample],
          model_cfg: ModelConfig, loss_cfg: LossConfig, cfg: TrainConfig, aug: AugmentConfig,
          run_dir: Path, resume: Path | None = None, model: ObjectCentricModel | None = None,
          config_record: dict | None = None) -> TrainResult:
    """Train on the ``train`` split; validation losses pick ``best.pt``.

    Raises TrainingDivergedError on a non-finite loss.
    """
    errors = cfg.validate() + loss_cfg.validate() + aug.validate() + model_cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    if not train_samples:
        raise ConfigError("training split is empty")

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / METRICS_FILE
    set_fixed_ops(cfg.deterministic)
    seed_everything(cfg.seed)
    if model is None:
        model = ObjectCentricModel(model_cfg)
    optimizer = build_optimizer(model, cfg)
    state = TrainState()

    if resume is not None:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload["model_state_dict"])
        if "optim_state_dict" in payload:
            optimizer.load_state_dict(payload["optim_state_dict"])
        state = TrainState(**payload["state"])
        restore_rng_state(state.rng)
        info(f"resumed from {resume} at step {state.step} (epoch {state.epoch})")

    per_epoch = steps_per_epoch(len(train_samples), cfg.batch_size)
    batch = min(cfg.batch_size, len(train_samples))
    model.train()

    while state.epoch < cfg.epochs:
        order = epoch_order(cfg.seed, state.epoch, len(train_samples))
        while state.batch_in_epoch < per_epoch:
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                path = save_checkpoint(run_dir / CHECKPOINT_DIR / LAST_CHECKPOINT, model, optimizer, state, config_record)
                state.last_checkpoint = str(path)
                return TrainResult(model, state, run_dir, finished=False)

            indices = order[state.batch_in_epoch * batch:(state.batch_in_epoch + 1) * batch]
            chunk = [train_samples[int(i)] for i in indices]
            seeds = [augment_seed(cfg.seed, state.epoch, int(i)) for i in indices]
            view0, view1 = make_views(chunk, seeds, aug)

            lr = lr_schedule(state.step, cfg, per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss, breakdown = compute_loss(model, view0, view1, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(state.step, state.last_checkpoint)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            norm = grad_norm(model.parameters())
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()

            append_jsonl(metrics_path, {
                "kind": "train",
                "step": state.step,
                "epoch": state.epoch,
                "lr": lr,
                "loss": breakdown["loss"],
                "loss_global": breakdown["loss_global"],
                "loss_object": breakdown["loss_object"],
                "grad_norm": norm,
                "timestamp": now_utc(),
            })
            state.step += 1
            state.batch_in_epoch += 1
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                path = save_checkpoint(run_dir / CHECKPOINT_DIR / f"step-{state.step:06d}.pt",
                                       model, optimizer, state, config_record)
                state.last_checkpoint = str(path)

        val = validation_loss(model, val_samples, aug, loss_cfg, cfg)
        if val is not None:
            append_jsonl(metrics_path, {
                "kind": "val",
                "step": state.step,
                "epoch": state.epoch,
                "loss": val["loss"],
                "loss_global": val["loss_global"],
                "loss_object": val["loss_object"],
                "timestamp": now_utc(),
            })
            info(f"epoch {state.epoch}: val loss {val['loss']:.4f}")
        state.epoch += 1
        state.batch_in_epoch = 0
        if val is not None and (state.best_val is None or val["loss"] < state.best_val):
            state.best_val = val["loss"]
            save_checkpoint(run_dir / BEST_CHECKPOINT, model, optimizer, state, config_record)
        path = save_checkpoint(run_dir / CHECKPOINT_DIR / LAST_CHECKPOINT, model, optimizer, state, config_record)
        state.last_checkpoint = str(path)

    if not (run_dir / BEST_CHECKPOINT).exists():
        if not val_samples:
            warn("no validation samples; best.pt is the final model")
        else:
            info("no validation improvement in this run; best.pt is the final model")
        save_checkpoint(run_dir / BEST_CHECKPOINT, model, optimizer, state, config_record)
    return TrainResult(model, state, run_dir, finished=True)
