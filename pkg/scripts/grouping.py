#!/usr/bin/env python3
"""
grouping.py — patch tokens → fixed-size set of object tokens

Two aggregation variants share the query interface:

- cross attention: pre-norm multi-head cross attention + MLP, 1-2 layers with
  separate weights; softmax over patches, so queries do not compete.
- slot attention: single head, softmax over the query axis (slots compete for
  each patch), per-slot row renormalisation, GRU slot update; projection and
  GRU weights are shared across iterations.

Query tokens come from a ``QueryGenerator``: learned embeddings (default and
the only stable option), a single learned Gaussian, a uniform mixture of
learned Gaussians, or k-means centroids of the patch tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from backbone import MLP, MultiHeadAttention, PatchTokens, init_weights
from ocl_utils import ConfigError

QUERY_KINDS = ("learned", "gaussian", "gaussian_mixture", "kmeans_init")
VARIANTS = ("slot", "cross", "none")


@dataclass
class QueryStrategy:
    kind: str = "learned"
    num_queries: int = 11
    num_components: int = 4
    kmeans_iters: int = 10

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.kind not in QUERY_KINDS:
            errors.append(f"unknown query kind: {self.kind} (expected one of {', '.join(QUERY_KINDS)})")
        if self.num_queries < 1:
            errors.append(f"num_queries must be >= 1: {self.num_queries}")
        if self.num_components < 1:
            errors.append(f"num_components must be >= 1: {self.num_components}")
        if self.kmeans_iters < 1:
            errors.append(f"kmeans_iters must be >= 1: {self.kmeans_iters}")
        return errors


@dataclass
class GroupingConfig:
    variant: str = "slot"
    num_queries: int = 11
    query_kind: str = "learned"
    num_components: int = 4
    kmeans_iters: int = 10
    iterations: int = 1
    layers: int = 2
    num_heads: int = 4
    epsilon: float = 1e-8

    def query_strategy(self) -> QueryStrategy:
        return QueryStrategy(self.query_kind, self.num_queries, self.num_components, self.kmeans_iters)

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.variant not in VARIANTS:
            errors.append(f"unknown grouping variant: {self.variant} (expected one of {', '.join(VARIANTS)})")
        if self.variant == "none":
            return errors
        errors.extend(self.query_strategy().validate())
        if self.variant == "slot" and self.iterations < 1:
            errors.append(f"slot attention needs iterations >= 1: {self.iterations}")
        if self.variant == "cross" and self.layers not in (1, 2):
            errors.append(f"cross attention supports 1 or 2 layers: {self.layers}")
        if self.epsilon <= 0:
            errors.append(f"epsilon must be positive: {self.epsilon}")
        return errors


@dataclass
class SlotSet:
    slots: torch.Tensor  # B×K×D
    attention: torch.Tensor  # B×K×N, first layer / iteration; rows sum to 1
    variant: str
    competition: torch.Tensor | None = None  # slot variant: B×K×N after the query-axis softmax


# ============================================================
# Query tokens
# ============================================================

def kmeans_centroids(points: torch.Tensor, k: int, iters: int,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Euclidean k-means on N×D points with farthest-first seeding; empty clusters re-seed
    from the point farthest from its centroid."""
    n = points.shape[0]
    if n < k:
        raise ConfigError(f"k-means needs at least {k} points, got {n}")
    first = int(torch.randint(n, (1,), generator=generator).item())
    chosen = [first]
    dist = torch.cdist(points, points[first:first + 1]).squeeze(1)
    for _ in range(1, k):
        nxt = int(torch.argmax(dist).item())
        chosen.append(nxt)
        dist = torch.minimum(dist, torch.cdist(points, points[nxt:nxt + 1]).squeeze(1))
    centroids = points[chosen].clone()

    for _ in range(iters):
        d = torch.cdist(points, centroids)
        assign = d.argmin(dim=1)
        counts = torch.bincount(assign, minlength=k)
        sums = torch.zeros_like(centroids).index_add_(0, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty].unsqueeze(1).to(points.dtype)
        if not nonempty.all():
            residual = d.gather(1, assign.unsqueeze(1)).squeeze(1)
            for cluster in torch.nonzero(~nonempty).flatten().tolist():
                far = int(torch.argmax(residual).item())
                centroids[cluster] = points[far]
                residual[far] = -1.0
    return centroids


class QueryGenerator(nn.Module):
    def __init__(self, strategy: QueryStrategy, dim: int):
        super().__init__()
        errors = strategy.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        self.strategy = strategy
        self.dim = dim
        k, c = strategy.num_queries, strategy.num_components
        if strategy.kind == "learned":
            self.embeddings = nn.Parameter(torch.empty(k, dim))
            nn.init.trunc_normal_(self.embeddings, std=0.02)
        elif strategy.kind == "gaussian":
            self.mean = nn.Parameter(torch.empty(dim))
            self.std = nn.Parameter(torch.full((dim,), 0.02))
            nn.init.trunc_normal_(self.mean, std=0.02)
        elif strategy.kind == "gaussian_mixture":
            self.means = nn.Parameter(torch.empty(c, dim))
            self.stds = nn.Parameter(torch.full((c, dim), 0.02))
            nn.init.trunc_normal_(self.means, std=0.02)

    def forward(self, batch_size: int, patches: PatchTokens | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        kind, k = self.strategy.kind, self.strategy.num_queries
        if kind == "learned":
            return self.embeddings.unsqueeze(0).expand(batch_size, -1, -1)
        if kind == "kmeans_init":
            if patches is None:
                raise ConfigError("kmeans_init queries require patch tokens")
            tokens = patches.tokens.detach()
            return torch.stack([
                kmeans_centroids(tokens[b], k, self.strategy.kmeans_iters, generator)
                for b in range(tokens.shape[0])
            ])
        ref = self.mean if kind == "gaussian" else self.means
        noise = torch.randn(batch_size, k, self.dim, generator=generator, dtype=ref.dtype, device=ref.device)
        if kind == "gaussian":
            return self.mean + self.std * noise
        idx = torch.randint(self.strategy.num_components, (batch_size, k), generator=generator, device=ref.device)
        return self.means[idx] + self.stds[idx] * noise


def make_queries(queries: QueryGenerator, patches: PatchTokens, rng_seed: int | None = None) -> torch.Tensor:
    """B×K×D query tokens. A seed makes sampled strategies reproducible; None uses the global RNG."""
    generator = None
    if rng_seed is not None:
        generator = torch.Generator(device=patches.tokens.device).manual_seed(rng_seed)
    return queries(patches.tokens.shape[0], patches, generator)


# ============================================================
# Cross attention
# ============================================================

class CrossAttentionBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_hidden: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_hidden, dim)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out, weights = self.attn(self.norm_q(q), self.norm_kv(kv))
        q = q + out
        q = q + self.mlp(self.norm_mlp(q))
        return q, weights


class CrossAttentionGrouping(nn.Module):
    def __init__(self, dim: int, layers: int, num_heads: int, mlp_hidden: int):
        super().__init__()
        self.blocks = nn.ModuleList(CrossAttentionBlock(dim, num_heads, mlp_hidden) for _ in range(layers))
        self.apply(init_weights)

    def forward(self, queries: torch.Tensor, tokens: torch.Tensor) -> SlotSet:
        x = queries
        first = None
        for block in self.blocks:
            x, weights = block(x, tokens)
            if first is None:
                first = weights.mean(dim=1)  # heads averaged
        return SlotSet(slots=x, attention=first, variant="cross")


def cross_attention(queries: torch.Tensor, patches: PatchTokens, module: CrossAttentionGrouping) -> SlotSet:
    return module(queries, patches.tokens)


# ============================================================
# Slot attention
# ============================================================

class SlotAttentionGrouping(nn.Module):
    def __init__(self, dim: int, iterations: int = 1, epsilon: float = 1e-8):
        super().__init__()
        self.iterations = iterations
        self.epsilon = epsilon
        self.scale = dim ** -0.5
        self.norm_inputs = nn.LayerNorm(dim)
        self.norm_slots = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.gru = nn.GRUCell(dim, dim)
        self.apply(init_weights)

    def forward(self, queries: torch.Tensor, tokens: torch.Tensor) -> SlotSet:
        b, k, d = queries.shape
        inputs = self.norm_inputs(tokens)
        keys, values = self.to_k(inputs), self.to_v(inputs)
        slots = queries
        first_attn = first_comp = None
        for _ in range(self.iterations):
            q = self.to_q(self.norm_slots(slots))
            logits = torch.einsum("bkd,bnd->bkn", q, keys) * self.scale
            competition = torch.softmax(logits, dim=1)  # each patch distributes mass over slots
            attn = competition / (competition.sum(dim=-1, keepdim=True) + self.epsilon)
            updates = torch.einsum("bkn,bnd->bkd", attn, values)
            slots = self.gru(updates.reshape(b * k, d), slots.reshape(b * k, d)).reshape(b, k, d)
            if first_attn is None:
                first_attn, first_comp = attn, competition
        return SlotSet(slots=slots, attention=first_attn, variant="slot", competition=first_comp)


def slot_attention(queries: torch.Tensor, patches: PatchTokens, module: SlotAttentionGrouping) -> SlotSet:
    return module(queries, patches.tokens)


def build_grouping(cfg: GroupingConfig, dim: int, mlp_hidden: int) -> nn.Module | None:
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    if cfg.variant == "slot":
        return SlotAttentionGrouping(dim, cfg.iterations, cfg.epsilon)
    if cfg.variant == "cross":
        return CrossAttentionGrouping(dim, cfg.layers, cfg.num_heads, mlp_hidden)
    return None
