#!/usr/bin/env python3
"""
model.py — backbone + grouping + heads as one module

variant "slot" / "cross": patches → query tokens → object tokens → (p_i, r, p^G)
variant "none":           patches + CLS → (r, p^G) only (global-only baseline)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from backbone import BackboneConfig, PatchTokens, VisionTransformer
from grouping import GroupingConfig, QueryGenerator, SlotSet, build_grouping, make_queries
from heads import GlobalBranch, HeadsConfig, ObjectProjectionHead, global_branch, global_branch_from_cls
from ocl_utils import ConfigError


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)

    def validate(self) -> list[str]:
        errors = self.backbone.validate() + self.grouping.validate() + self.heads.validate()
        if self.grouping.variant == "none" and not self.backbone.use_cls_token:
            errors.append("grouping variant 'none' needs backbone.use_cls_token=true")
        if self.grouping.variant == "cross" and self.backbone.embed_dim % max(self.grouping.num_heads, 1):
            errors.append(
                f"embed_dim={self.backbone.embed_dim} not divisible by grouping.num_heads={self.grouping.num_heads}"
            )
        return errors


@dataclass
class ModelOutput:
    patches: PatchTokens
    slots: SlotSet | None
    p_obj: torch.Tensor | None  # B×K×D_p
    r: torch.Tensor  # B×D_r
    p_global: torch.Tensor  # B×D_p


class ObjectCentricModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        errors = cfg.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        self.cfg = cfg
        d = cfg.backbone.embed_dim
        self.backbone = VisionTransformer(cfg.backbone)
        self.grouping = build_grouping(cfg.grouping, d, cfg.backbone.mlp_hidden)
        if self.grouping is not None:
            self.queries = QueryGenerator(cfg.grouping.query_strategy(), d)
            self.object_head = ObjectProjectionHead(d, cfg.heads.object_proj_dim)
        else:
            self.queries = None
            self.object_head = None
        self.global_branch = GlobalBranch(d, cfg.heads.global_repr_dim, cfg.heads.global_proj_dim)

    @property
    def variant(self) -> str:
        return self.cfg.grouping.variant

    def forward(self, images: torch.Tensor, query_seed: int | None = None) -> ModelOutput:
        patches = self.backbone(images)
        if self.grouping is None:
            r, p_global = global_branch_from_cls(patches.cls, self.global_branch)
            return ModelOutput(patches, None, None, r, p_global)
        queries = make_queries(self.queries, patches, query_seed)
        slot_set = self.grouping(queries, patches.tokens)
        p_obj = self.object_head(slot_set.slots)
        r, p_global = global_branch(slot_set.slots, self.global_branch)
        return ModelOutput(patches, slot_set, p_obj, r, p_global)
