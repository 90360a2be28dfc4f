#!/usr/bin/env python3
"""
losses.py — global and object-level contrastive objectives

All losses are means over anchors. Contrastive terms are InfoNCE over cosine
similarities divided by the temperature; the denominator always holds the
positive plus the negative set.

    global   anchors: 2B projections p^G; negatives: the other 2B−2
    ctrall   anchors: 2BK object projections; negatives: every other token in the batch
    ctrimg   anchors: 2BK object projections; negatives: tokens of the same image pair only
    cossim   −cos(p_abi, stopgrad(s_āb σ(i))), projection against the matched raw slot

The batched forms align view 1 by σ once and evaluate a single
(2BK)×(2BK) similarity matrix; the *_reference functions loop over anchors and
match each direction separately. Both agree whenever the matching is unique.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from assignment import match_batch, match_slots
from ocl_utils import ConfigError, ZeroNormError, warn

OBJECT_LOSSES = ("ctrall", "ctrimg", "cossim", "none")


@dataclass
class LossConfig:
    temperature: float = 0.1
    object_loss: str = "ctrimg"
    use_global: bool = True
    object_weight: float = 1.0
    global_weight: float = 1.0

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.temperature <= 0:
            errors.append(f"temperature must be positive: {self.temperature}")
        if self.object_loss not in OBJECT_LOSSES:
            errors.append(f"unknown object_loss: {self.object_loss} (expected one of {', '.join(OBJECT_LOSSES)})")
        if self.object_weight < 0 or self.global_weight < 0:
            errors.append("loss weights must be non-negative")
        if not self.use_global and self.object_loss == "none":
            errors.append("at least one loss must be enabled (use_global=false and object_loss=none)")
        return errors


@dataclass
class BatchProjections:
    p_global: torch.Tensor  # 2×B×D_p
    p_obj: torch.Tensor | None = None  # 2×B×K×D_p
    s_obj: torch.Tensor | None = None  # 2×B×K×D
    sigma: torch.Tensor | None = None  # B×K, view-0 token i ↔ view-1 token sigma[b, i]
    zero_norm: int = 0

    @classmethod
    def from_views(cls, p_global: tuple[torch.Tensor, torch.Tensor],
                   p_obj: tuple[torch.Tensor, torch.Tensor] | None = None,
                   s_obj: tuple[torch.Tensor, torch.Tensor] | None = None) -> "BatchProjections":
        return cls(
            p_global=torch.stack(p_global),
            p_obj=torch.stack(p_obj) if p_obj is not None else None,
            s_obj=torch.stack(s_obj) if s_obj is not None else None,
        )

    def matching(self) -> torch.Tensor:
        """σ per image from the raw slots; computed once, without gradient."""
        if self.sigma is None:
            if self.s_obj is None:
                raise ConfigError("object losses need raw slots for matching")
            self.sigma, self.zero_norm = match_batch(self.s_obj[0], self.s_obj[1])
            if self.zero_norm:
                warn(f"{self.zero_norm} zero-norm slot(s) during matching; their cosines were taken as 0")
        return self.sigma


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ZeroNormError(f"zero-norm {what}: cosine similarity undefined")
    return x / norms


def _align(x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """x: B×K×D reordered so that row i holds token sigma[b, i]."""
    index = sigma.long().unsqueeze(-1).expand(-1, -1, x.shape[-1])
    return torch.gather(x, 1, index)


def _info_nce(z0: torch.Tensor, z1: torch.Tensor, temperature: float,
              groups: torch.Tensor | None = None) -> torch.Tensor:
    """Symmetric InfoNCE for M positive pairs (z0[m], z1[m]).

    Denominators run over all 2M−1 other tokens; with ``groups`` only tokens
    sharing the anchor's group are kept.
    """
    m = z0.shape[0]
    z = torch.cat([z0, z1], dim=0)
    logits = z @ z.T / temperature
    keep = ~torch.eye(2 * m, dtype=torch.bool, device=z.device)
    if groups is not None:
        g = torch.cat([groups, groups])
        keep &= g.unsqueeze(0) == g.unsqueeze(1)
    logits = logits.masked_fill(~keep, float("-inf"))
    targets = torch.cat([torch.arange(m, 2 * m), torch.arange(0, m)]).to(z.device)
    return F.cross_entropy(logits, targets)


# ============================================================
# Global loss
# ============================================================

def global_loss(batch: BatchProjections, temperature: float) -> torch.Tensor:
    z = _unit(batch.p_global, "global projection")
    return _info_nce(z[0], z[1], temperature)


# ============================================================
# Object losses
# ============================================================

def object_loss_contrastive(batch: BatchProjections, temperature: float, negatives: str) -> torch.Tensor:
    if negatives not in ("ctrall", "ctrimg"):
        raise ConfigError(f"negative set must be ctrall or ctrimg, got {negatives}")
    if batch.p_obj is None:
        raise ConfigError("object loss needs object projections")
    sigma = batch.matching()
    p = _unit(batch.p_obj, "object projection")
    b, k, d = p.shape[1:]
    z0 = p[0].reshape(b * k, d)
    z1 = _align(p[1], sigma).reshape(b * k, d)
    groups = None
    if negatives == "ctrimg":
        groups = torch.arange(b, device=p.device).repeat_interleave(k)
    return _info_nce(z0, z1, temperature, groups)


def object_loss_cossim(batch: BatchProjections) -> torch.Tensor:
    if batch.p_obj is None or batch.s_obj is None:
        raise ConfigError("cossim needs object projections and raw slots")
    if batch.p_obj.shape[-1] != batch.s_obj.shape[-1]:
        raise ConfigError(
            f"cossim compares projections (width {batch.p_obj.shape[-1]}) with raw slots "
            f"(width {batch.s_obj.shape[-1]}); set heads.object_proj_dim to the embedding width"
        )
    sigma = batch.matching()
    p = _unit(batch.p_obj, "object projection")
    s = _unit(batch.s_obj.detach(), "object token")
    p1, s1 = _align(p[1], sigma), _align(s[1], sigma)
    cos = torch.cat([(p[0] * s1).sum(-1), (p1 * s[0]).sum(-1)])
    return -cos.mean()


def total_loss(batch: BatchProjections, cfg: LossConfig) -> tuple[torch.Tensor, dict[str, float | None]]:
    """Weighted sum of the enabled terms plus a float breakdown for logging."""
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    total = batch.p_global.new_zeros(())
    breakdown: dict[str, float | None] = {"loss_global": None, "loss_object": None}
    if cfg.use_global:
        lg = global_loss(batch, cfg.temperature)
        total = total + cfg.global_weight * lg
        breakdown["loss_global"] = float(lg.detach())
    if cfg.object_loss in ("ctrall", "ctrimg"):
        lo = object_loss_contrastive(batch, cfg.temperature, cfg.object_loss)
    elif cfg.object_loss == "cossim":
        lo = object_loss_cossim(batch)
    else:
        lo = None
    if lo is not None:
        total = total + cfg.object_weight * lo
        breakdown["loss_object"] = float(lo.detach())
    breakdown["loss"] = float(total.detach())
    breakdown["zero_norm"] = batch.zero_norm
    return total, breakdown


# ============================================================
# Per-anchor references
# ============================================================

def _directional_sigmas(s_obj: torch.Tensor) -> list[list]:
    """sigmas[a][b]: permutation from view a to the other view of image b."""
    out: list[list] = [[], []]
    for b in range(s_obj.shape[1]):
        out[0].append(match_slots(s_obj[0, b], s_obj[1, b]).sigma)
        out[1].append(match_slots(s_obj[1, b], s_obj[0, b]).sigma)
    return out


def object_loss_contrastive_reference(batch: BatchProjections, temperature: float,
                                      negatives: str) -> torch.Tensor:
    p = _unit(batch.p_obj, "object projection")
    _, b_count, k, _ = p.shape
    sigmas = _directional_sigmas(batch.s_obj)
    terms = []
    for a in range(2):
        for b in range(b_count):
            for i in range(k):
                anchor = p[a, b, i]
                j = int(sigmas[a][b][i])
                positive = torch.dot(anchor, p[1 - a, b, j]) / temperature
                logits = [positive]
                for a2 in range(2):
                    for b2 in range(b_count):
                        if negatives == "ctrimg" and b2 != b:
                            continue
                        for i2 in range(k):
                            if (a2, b2, i2) in ((a, b, i), (1 - a, b, j)):
                                continue
                            logits.append(torch.dot(anchor, p[a2, b2, i2]) / temperature)
                terms.append(-(positive - torch.logsumexp(torch.stack(logits), dim=0)))
    return torch.stack(terms).mean()


def object_loss_cossim_reference(batch: BatchProjections) -> torch.Tensor:
    p = _unit(batch.p_obj, "object projection")
    s = _unit(batch.s_obj.detach(), "object token")
    sigmas = _directional_sigmas(batch.s_obj)
    terms = []
    for a in range(2):
        for b in range(p.shape[1]):
            for i in range(p.shape[2]):
                j = int(sigmas[a][b][i])
                terms.append(-torch.dot(p[a, b, i], s[1 - a, b, j]))
    return torch.stack(terms).mean()
