#!/usr/bin/env python3
"""
backbone.py — Vision Transformer mapping an image to patch tokens

Pre-norm transformer blocks (LayerNorm → attention → residual, LayerNorm → GeLU
MLP → residual). Learned positional embeddings live on a fixed grid, are
resampled bilinearly when the token grid differs, and are added at the entry of
every block. A CLS token is only created for the global-only configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ocl_utils import ConfigError, NonFiniteError


@dataclass
class BackboneConfig:
    image_size: int = 128
    patch_size: int = 4
    embed_dim: int = 256
    num_layers: int = 2
    num_heads: int = 4
    mlp_hidden: int = 512
    use_cls_token: bool = False
    pos_grid: int = 32
    check_finite: bool = True

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.num_heads <= 0 or self.embed_dim % self.num_heads != 0:
            errors.append(f"embed_dim={self.embed_dim} not divisible by num_heads={self.num_heads}")
        if self.patch_size <= 0 or self.image_size % self.patch_size != 0:
            errors.append(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if self.num_layers < 1:
            errors.append(f"num_layers must be >= 1: {self.num_layers}")
        if self.mlp_hidden < 1 or self.pos_grid < 1:
            errors.append("mlp_hidden and pos_grid must be positive")
        return errors


@dataclass
class PatchTokens:
    tokens: torch.Tensor  # B×N×D
    grid_shape: tuple[int, int]
    cls: torch.Tensor | None = None  # B×D
    attentions: list[torch.Tensor] = field(default_factory=list)  # per layer, B×heads×T×T


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, 3, H, W) → (B, N, 3·P²), row-major patch order; each row is a flattened (C, P, P) block."""
    squeeze = images.dim() == 3
    if squeeze:
        images = images.unsqueeze(0)
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image side ({h}×{w}) not divisible by patch size {p}")
    patches = images.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
    patches = patches.reshape(b, (h // p) * (w // p), c * p * p)
    return patches[0] if squeeze else patches


def init_weights(module: nn.Module) -> None:
    """Truncated normal (std 0.02) for projections, zero biases, unit LayerNorm scales."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; returns the output and the per-head weights."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim={dim} not divisible by num_heads={num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv))
        weights = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(x_q.shape[0], x_q.shape[1], -1)
        return self.proj(out), weights


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_hidden, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.norm1(x)
        out, weights = self.attn(h, h)
        x = x + out
        x = x + self.mlp(self.norm2(x))
        return x, weights


class VisionTransformer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        errors = cfg.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(3 * cfg.patch_size**2, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, d, cfg.pos_grid, cfg.pos_grid))
        if cfg.use_cls_token:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
            self.cls_pos = nn.Parameter(torch.zeros(1, 1, d))
        else:
            self.cls_token = None
            self.cls_pos = None
        self.blocks = nn.ModuleList(
            EncoderBlock(d, cfg.num_heads, cfg.mlp_hidden) for _ in range(cfg.num_layers)
        )
        self.norm = nn.LayerNorm(d)

        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.cls_token is not None:
            nn.init.trunc_normal_(self.cls_token, std=0.02)
            nn.init.trunc_normal_(self.cls_pos, std=0.02)

    def positional_embedding(self, grid_h: int, grid_w: int) -> torch.Tensor:
        """(1, N, D) embedding for a grid_h × grid_w token grid."""
        pos = self.pos_embed
        if pos.shape[-2:] != (grid_h, grid_w):
            pos = F.interpolate(pos, size=(grid_h, grid_w), mode="bilinear", align_corners=False)
        pos = pos.flatten(2).transpose(1, 2)
        if self.cls_pos is not None:
            pos = torch.cat([self.cls_pos, pos], dim=1)
        return pos

    def _check(self, x: torch.Tensor, where: str) -> None:
        if self.cfg.check_finite and not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite activations after {where}")

    def forward_tokens(self, x: torch.Tensor, pos: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Run the blocks on an embedded sequence; ``pos`` is re-added at every block entry."""
        attentions = []
        for idx, block in enumerate(self.blocks):
            x, weights = block(x + pos)
            self._check(x, f"block {idx}")
            attentions.append(weights)
        x = self.norm(x)
        self._check(x, "final norm")
        return x, attentions

    def forward(self, images: torch.Tensor) -> PatchTokens:
        p = self.cfg.patch_size
        grid = (images.shape[-2] // p, images.shape[-1] // p)
        x = self.patch_embed(patchify(images, p))
        self._check(x, "patch embedding")
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x, attentions = self.forward_tokens(x, self.positional_embedding(*grid))
        if self.cls_token is not None:
            return PatchTokens(x[:, 1:], grid, cls=x[:, 0], attentions=attentions)
        return PatchTokens(x, grid, attentions=attentions)


def encode(images: torch.Tensor, backbone: VisionTransformer) -> PatchTokens:
    return backbone(images)
