#!/usr/bin/env python3
"""
heads.py — projection heads for object tokens and the global branch

Object tokens s_i go through a shared 2-layer MLP (hidden width D) to p_i.
The global branch mean-pools the object tokens (or takes the backbone CLS
token in the global-only configuration), maps the pooled vector to the scene
representation r, and projects r to p^G. Outputs are not normalised; the
losses use cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from backbone import MLP, init_weights


@dataclass
class HeadsConfig:
    object_proj_dim: int = 128
    global_repr_dim: int = 256
    global_proj_dim: int = 128

    def validate(self) -> list[str]:
        errors: list[str] = []
        for name in ("object_proj_dim", "global_repr_dim", "global_proj_dim"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be positive: {getattr(self, name)}")
        return errors


@dataclass
class Projections:
    p_obj: torch.Tensor | None  # B×K×D_p
    r: torch.Tensor  # B×D_r
    p_global: torch.Tensor  # B×D_p


class ObjectProjectionHead(nn.Module):
    def __init__(self, dim: int, proj_dim: int):
        super().__init__()
        self.mlp = MLP(dim, dim, proj_dim)
        self.apply(init_weights)

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        return self.mlp(slots)


class GlobalBranch(nn.Module):
    """pooled token → r → p^G, both 2-layer GeLU MLPs."""

    def __init__(self, dim: int, repr_dim: int, proj_dim: int):
        super().__init__()
        self.representation = MLP(dim, dim, repr_dim)
        self.head = MLP(repr_dim, repr_dim, proj_dim)
        self.apply(init_weights)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        r = self.representation(pooled)
        return r, self.head(r)


def project_objects(slots: torch.Tensor, head: ObjectProjectionHead) -> torch.Tensor:
    return head(slots)


def global_branch(slots: torch.Tensor, branch: GlobalBranch) -> tuple[torch.Tensor, torch.Tensor]:
    """(r, p^G) from the mean over the slot axis; invariant to slot order."""
    return branch(slots.mean(dim=-2))


def global_branch_from_cls(cls: torch.Tensor, branch: GlobalBranch) -> tuple[torch.Tensor, torch.Tensor]:
    return branch(cls)
