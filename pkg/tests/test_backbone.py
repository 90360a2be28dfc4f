"""Tests for backbone.py — Tier 1 (patchify, transformer blocks, gradients, token-order equivariance)."""

import pytest
import torch
from torch.func import functional_call

from backbone import (
    BackboneConfig,
    EncoderBlock,
    MultiHeadAttention,
    VisionTransformer,
    encode,
    patchify,
)
from ocl_utils import ConfigError, NonFiniteError


def tiny_cfg(**overrides) -> BackboneConfig:
    params = dict(image_size=16, patch_size=4, embed_dim=16, num_layers=1, num_heads=2, mlp_hidden=32, pos_grid=4)
    params.update(overrides)
    return BackboneConfig(**params)


# ============================================================
# Tier 1: patchify
# ============================================================

class TestPatchify:
    def test_full_scale_shape(self):
        assert patchify(torch.zeros(2, 3, 128, 128), 4).shape == (2, 1024, 48)

    def test_single_patch_is_flattened_image(self):
        image = torch.arange(48, dtype=torch.float32).reshape(3, 4, 4)
        patches = patchify(image, 4)
        assert patches.shape == (1, 48)
        assert torch.equal(patches[0], image.flatten())

    def test_row_major_order(self):
        image = torch.arange(3 * 8 * 8, dtype=torch.float32).reshape(1, 3, 8, 8)
        patches = patchify(image, 4)[0]
        assert torch.equal(patches[1], image[0, :, 0:4, 4:8].flatten())
        assert torch.equal(patches[2], image[0, :, 4:8, 0:4].flatten())

    def test_constant_image_rows_identical(self):
        patches = patchify(torch.full((1, 3, 8, 8), 0.5), 4)[0]
        assert torch.equal(patches, patches[:1].expand_as(patches))

    def test_non_divisible_side(self):
        with pytest.raises(ConfigError):
            patchify(torch.zeros(1, 3, 10, 10), 4)


# ============================================================
# Tier 1: transformer
# ============================================================

class TestBackboneConfig:
    def test_heads_must_divide_dim(self):
        assert BackboneConfig(embed_dim=10, num_heads=4).validate()
        with pytest.raises(ConfigError):
            VisionTransformer(tiny_cfg(embed_dim=10, num_heads=4))

    def test_grid_size(self):
        assert BackboneConfig().grid_size == 32


class TestVisionTransformer:
    def test_token_shapes(self):
        torch.manual_seed(0)
        out = encode(torch.rand(2, 3, 16, 16), VisionTransformer(tiny_cfg()))
        assert out.tokens.shape == (2, 16, 16)
        assert out.grid_shape == (4, 4)
        assert out.cls is None
        assert len(out.attentions) == 1

    def test_cls_token(self):
        torch.manual_seed(0)
        out = VisionTransformer(tiny_cfg(use_cls_token=True))(torch.rand(2, 3, 16, 16))
        assert out.tokens.shape == (2, 16, 16)
        assert out.cls.shape == (2, 16)
        assert out.attentions[0].shape == (2, 2, 17, 17)

    def test_positional_grid_resampled(self):
        torch.manual_seed(0)
        vit = VisionTransformer(tiny_cfg(pos_grid=4))
        out = vit(torch.rand(1, 3, 32, 32))
        assert out.tokens.shape == (1, 64, 16)
        assert vit.positional_embedding(8, 8).shape == (1, 64, 16)

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(0)
        out = VisionTransformer(tiny_cfg())(torch.rand(1, 3, 16, 16))
        assert torch.allclose(out.attentions[0].sum(-1), torch.ones(1, 2, 16), atol=1e-5)

    def test_deterministic_in_eval(self):
        torch.manual_seed(0)
        vit = VisionTransformer(tiny_cfg()).eval()
        images = torch.rand(2, 3, 16, 16)
        with torch.no_grad():
            assert torch.equal(vit(images).tokens, vit(images).tokens)

    def test_non_finite_names_layer(self):
        vit = VisionTransformer(tiny_cfg())
        images = torch.rand(1, 3, 16, 16)
        images[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError, match="patch embedding"):
            vit(images)

    def test_non_finite_check_can_be_disabled(self):
        vit = VisionTransformer(tiny_cfg(check_finite=False))
        images = torch.rand(1, 3, 16, 16)
        images[0, 0, 0, 0] = float("nan")
        assert torch.isnan(vit(images).tokens).any()


class TestGradients:
    def test_attention_gradcheck(self):
        torch.manual_seed(0)
        attn = MultiHeadAttention(4, 2).double()
        x = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: attn(t, t)[0], (x,))

    def test_encoder_block_gradcheck(self):
        torch.manual_seed(0)
        block = EncoderBlock(4, 2, 8).double()
        x = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: block(t)[0], (x,))

    def test_embedding_and_final_norm_gradcheck(self):
        torch.manual_seed(0)
        # 2×2 token grid against a 3×3 positional grid: the bilinear resample is in the graph
        vit = VisionTransformer(tiny_cfg(image_size=8, embed_dim=4, mlp_hidden=8, pos_grid=3)).double()
        with torch.no_grad():
            for param in vit.parameters():
                param.normal_(0.0, 0.5)
        images = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        names = ("patch_embed.weight", "patch_embed.bias", "pos_embed", "norm.weight", "norm.bias")
        params = dict(vit.named_parameters())
        frozen = {name: p.detach() for name, p in params.items() if name not in names}

        def tokens(*values):
            return functional_call(vit, {**frozen, **dict(zip(names, values))}, (images,)).tokens

        inputs = tuple(params[name].detach().clone().requires_grad_(True) for name in names)
        assert torch.autograd.gradcheck(tokens, inputs)


class TestPermutationEquivariance:
    def test_forward_tokens(self):
        torch.manual_seed(0)
        vit = VisionTransformer(tiny_cfg(num_layers=2)).double().eval()
        x = torch.randn(2, 16, 16, dtype=torch.float64)
        pos = torch.randn(1, 16, 16, dtype=torch.float64)
        perm = torch.randperm(16)
        out, attentions = vit.forward_tokens(x, pos)
        out_perm, attentions_perm = vit.forward_tokens(x[:, perm], pos[:, perm])
        assert torch.allclose(out_perm, out[:, perm], atol=1e-10)
        assert torch.allclose(attentions_perm[0], attentions[0][..., perm, :][..., perm], atol=1e-10)
