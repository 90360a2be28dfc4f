"""Tests for grouping.py — Tier 1 (query generators, cross attention, slot attention)."""

import pytest
import torch

from backbone import PatchTokens
from grouping import (
    CrossAttentionGrouping,
    GroupingConfig,
    QueryGenerator,
    QueryStrategy,
    SlotAttentionGrouping,
    build_grouping,
    cross_attention,
    kmeans_centroids,
    make_queries,
    slot_attention,
)
from ocl_utils import ConfigError


def tokens(b=2, n=9, d=8, seed=0) -> torch.Tensor:
    return torch.randn(b, n, d, generator=torch.Generator().manual_seed(seed))


def patch_tokens(b=2, n=9, d=8) -> PatchTokens:
    return PatchTokens(tokens(b, n, d), (3, 3))


# ============================================================
# Tier 1: configuration
# ============================================================

class TestGroupingConfig:
    def test_defaults_valid(self):
        assert GroupingConfig().validate() == []

    def test_unknown_variant(self):
        assert GroupingConfig(variant="perceiver").validate()

    def test_cross_layers_limited(self):
        assert GroupingConfig(variant="cross", layers=3).validate()

    def test_slot_needs_iterations(self):
        assert GroupingConfig(variant="slot", iterations=0).validate()

    def test_unknown_query_kind(self):
        assert GroupingConfig(query_kind="random").validate()

    def test_none_variant_has_no_module(self):
        assert build_grouping(GroupingConfig(variant="none"), 8, 16) is None

    def test_build_rejects_invalid(self):
        with pytest.raises(ConfigError):
            build_grouping(GroupingConfig(variant="cross", layers=5), 8, 16)


# ============================================================
# Tier 1: query tokens
# ============================================================

class TestQueryGenerator:
    def test_learned_returns_stored_embeddings(self):
        gen = QueryGenerator(QueryStrategy("learned", num_queries=11), 16)
        out = gen(3)
        assert out.shape == (3, 11, 16)
        assert torch.equal(out[1], gen.embeddings)

    def test_gaussian_zero_std_gives_mean(self):
        gen = QueryGenerator(QueryStrategy("gaussian", num_queries=5), 8)
        with torch.no_grad():
            gen.std.zero_()
        out = gen(2)
        assert torch.equal(out, gen.mean.expand(2, 5, 8))

    def test_mixture_zero_std_picks_components(self):
        gen = QueryGenerator(QueryStrategy("gaussian_mixture", num_queries=6, num_components=3), 8)
        with torch.no_grad():
            gen.stds.zero_()
        out = gen(2, generator=torch.Generator().manual_seed(0))
        for query in out.reshape(-1, 8):
            assert any(torch.equal(query, mean) for mean in gen.means)

    def test_seeded_sampling_reproducible(self):
        gen = QueryGenerator(QueryStrategy("gaussian", num_queries=5), 8)
        patches = patch_tokens(d=8)
        assert torch.equal(make_queries(gen, patches, rng_seed=3), make_queries(gen, patches, rng_seed=3))
        assert not torch.equal(make_queries(gen, patches, rng_seed=3), make_queries(gen, patches, rng_seed=4))

    def test_kmeans_needs_patches(self):
        gen = QueryGenerator(QueryStrategy("kmeans_init", num_queries=2), 8)
        with pytest.raises(ConfigError):
            gen(1)

    def test_kmeans_queries_shape(self):
        gen = QueryGenerator(QueryStrategy("kmeans_init", num_queries=3, kmeans_iters=5), 8)
        assert make_queries(gen, patch_tokens(d=8), rng_seed=0).shape == (2, 3, 8)

    def test_invalid_strategy(self):
        with pytest.raises(ConfigError):
            QueryGenerator(QueryStrategy("learned", num_queries=0), 8)


class TestKMeans:
    def test_planted_clusters(self):
        g = torch.Generator().manual_seed(0)
        a = torch.rand(20, 2, generator=g)
        b = torch.rand(20, 2, generator=g) + 10.0
        centroids = kmeans_centroids(torch.cat([a, b]), 2, 10, g)
        near_a = centroids[centroids[:, 0] < 5]
        near_b = centroids[centroids[:, 0] >= 5]
        assert len(near_a) == 1 and len(near_b) == 1
        assert torch.allclose(near_a[0], a.mean(0), atol=1e-5)
        assert torch.allclose(near_b[0], b.mean(0), atol=1e-5)

    def test_duplicate_points_reseed(self):
        points = torch.zeros(5, 2)
        points[4] = 1.0
        centroids = kmeans_centroids(points, 3, 4, torch.Generator().manual_seed(0))
        assert centroids.shape == (3, 2)
        assert torch.isfinite(centroids).all()

    def test_too_few_points(self):
        with pytest.raises(ConfigError):
            kmeans_centroids(torch.zeros(2, 3), 3, 5)


# ============================================================
# Tier 1: cross attention
# ============================================================

class TestCrossAttention:
    def setup_method(self):
        torch.manual_seed(0)
        self.module = CrossAttentionGrouping(8, layers=2, num_heads=2, mlp_hidden=16)

    def test_shapes(self):
        queries = torch.randn(2, 4, 8)
        out = cross_attention(queries, patch_tokens(d=8), self.module)
        assert out.slots.shape == (2, 4, 8)
        assert out.attention.shape == (2, 4, 9)
        assert out.variant == "cross"
        assert torch.allclose(out.attention.sum(-1), torch.ones(2, 4), atol=1e-5)

    def test_identical_queries_identical_slots(self):
        queries = torch.randn(1, 1, 8).expand(2, 3, 8)
        out = self.module(queries, tokens(d=8))
        assert torch.allclose(out.slots[:, 0], out.slots[:, 1], atol=1e-6)
        assert torch.allclose(out.slots[:, 0], out.slots[:, 2], atol=1e-6)

    def test_query_permutation_equivariance(self):
        queries = torch.randn(2, 4, 8)
        perm = torch.tensor([2, 0, 3, 1])
        x = tokens(d=8)
        a = self.module(queries, x).slots
        b = self.module(queries[:, perm], x).slots
        assert torch.allclose(a[:, perm], b, atol=1e-5)

    def test_patch_permutation_invariance(self):
        queries = torch.randn(2, 4, 8)
        x = tokens(d=8)
        perm = torch.randperm(9, generator=torch.Generator().manual_seed(1))
        assert torch.allclose(self.module(queries, x).slots, self.module(queries, x[:, perm]).slots, atol=1e-5)


# ============================================================
# Tier 1: slot attention
# ============================================================

class TestSlotAttention:
    def setup_method(self):
        torch.manual_seed(0)
        self.module = SlotAttentionGrouping(8, iterations=1)

    @pytest.mark.parametrize("seed", range(100))
    def test_weights_normalised(self, seed):
        gen = torch.Generator().manual_seed(seed)
        queries = torch.randn(2, 4, 8, generator=gen)
        x = 3 * torch.randn(2, 9, 8, generator=gen)
        out = slot_attention(queries, PatchTokens(x, (3, 3)), self.module)
        assert out.attention.shape == (2, 4, 9)
        assert out.variant == "slot"
        assert torch.allclose(out.competition.sum(dim=1), torch.ones(2, 9), atol=1e-5)
        assert torch.allclose(out.attention.sum(dim=-1), torch.ones(2, 4), atol=1e-5)
        assert (out.attention >= 0).all()

    def test_single_slot_trivial_weights(self):
        out = self.module(torch.randn(2, 1, 8), tokens(d=8))
        assert torch.allclose(out.competition, torch.ones(2, 1, 9))
        assert torch.allclose(out.attention, torch.full((2, 1, 9), 1 / 9), atol=1e-6)

    def test_query_permutation_equivariance(self):
        module = SlotAttentionGrouping(8, iterations=3)
        queries = torch.randn(2, 4, 8)
        perm = torch.tensor([3, 1, 0, 2])
        x = tokens(d=8)
        assert torch.allclose(module(queries, x).slots[:, perm], module(queries[:, perm], x).slots, atol=1e-5)

    def test_patch_permutation_invariance(self):
        queries = torch.randn(2, 4, 8)
        x = tokens(d=8)
        perm = torch.randperm(9, generator=torch.Generator().manual_seed(2))
        assert torch.allclose(self.module(queries, x).slots, self.module(queries, x[:, perm]).slots, atol=1e-5)

    def test_gradcheck(self):
        module = SlotAttentionGrouping(4, iterations=2).double()
        queries = torch.randn(1, 2, 4, dtype=torch.float64, requires_grad=True)
        x = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda q, t: module(q, t).slots, (queries, x))
