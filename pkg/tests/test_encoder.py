import numpy as np
import pytest
import torch

from fdcheck import fd_gradient, max_rel_err
from patchseg.encoder import (
    AddFusion,
    AsymmetricContextBlock,
    Backbone,
    CascadeNeck,
    ConcatFusion,
    Encoder,
    StageAttentionFusion,
    init_fan_in_uniform,
    pool_image_embedding,
    resize_to_grid,
)

TINY_WIDTHS = (4, 4, 8, 8, 8)


def tiny_encoder(fusion="attention", d=8, patch_size=32):
    torch.manual_seed(0)
    return Encoder(1, TINY_WIDTHS, blocks_per_stage=1, d=d, patch_size=patch_size, fusion=fusion)


class TestBackbone:
    def test_stride_schedule_96(self):
        net = Backbone(1, TINY_WIDTHS, 1)
        feats = net(torch.randn(2, 1, 96, 96))
        assert [f.shape[-1] for f in feats] == [24, 12, 6, 3]
        assert [f.shape[1] for f in feats] == list(TINY_WIDTHS[1:])

    def test_f5_size_384(self):
        net = Backbone(1, TINY_WIDTHS, 1)
        feats = net(torch.randn(1, 1, 384, 384))
        assert feats[-1].shape[-2:] == (12, 12)

    def test_shape_contract_up_to_512(self):
        net = Backbone(1, TINY_WIDTHS, 1)
        for h, w in [(32, 32), (64, 160), (512, 512)]:
            feats = net(torch.randn(1, 1, h, w))
            for n, f in zip(range(2, 6), feats):
                assert f.shape[-2:] == (h // 2**n, w // 2**n)
                assert torch.isfinite(f).all()

    def test_non_divisible_rejected(self):
        net = Backbone(1, TINY_WIDTHS, 1)
        with pytest.raises(ValueError):
            net(torch.randn(1, 1, 96, 100))

    def test_zero_weights_give_zero_features(self):
        net = Backbone(1, TINY_WIDTHS, 1)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        feats = net(torch.randn(1, 1, 64, 64))
        for f in feats:
            assert torch.all(f == 0)


class TestContextBlock:
    @pytest.mark.parametrize("size", [(5, 5), (3, 3), (24, 24), (7, 13)])
    def test_spatial_size_preserved(self, size):
        block = AsymmetricContextBlock(8)
        x = torch.randn(1, 8, *size)
        assert block(x).shape == x.shape

    def test_asymmetric_pair_cheaper_than_3x3(self):
        block = AsymmetricContextBlock(32)
        for branch in block.branches:
            pair = branch[2].weight.numel() + branch[3].weight.numel()
            c = branch[2].weight.shape[0]
            assert pair < 9 * c * c

    def test_input_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        block = AsymmetricContextBlock(4).double()
        x = torch.randn(1, 4, 6, 6, dtype=torch.float64, requires_grad=True)
        target = torch.randn(1, 4, 6, 6, dtype=torch.float64)

        def loss_fn():
            return ((block(x) - target) ** 2).mean()

        loss_fn().backward()
        rng = np.random.default_rng(0)
        entries = sorted(rng.choice(x.numel(), size=30, replace=False).tolist())
        idxs, fd_vals = fd_gradient(loss_fn, x, entries=entries)
        assert max_rel_err(x.grad.view(-1), idxs, fd_vals) < 1e-4


class TestCascade:
    def test_output_shapes(self):
        torch.manual_seed(1)
        backbone = Backbone(1, TINY_WIDTHS, 1)
        neck = CascadeNeck(TINY_WIDTHS[1:], d=16)
        out = neck(backbone(torch.randn(1, 1, 96, 96)))
        assert len(out) == 4
        for f in out:
            assert f.shape == (1, 16, 3, 3)

    def test_top_down_dependency(self):
        torch.manual_seed(2)
        neck = CascadeNeck(TINY_WIDTHS[1:], d=8)
        feats = [torch.randn(1, c, 32 // 2**n, 32 // 2**n) for n, c in zip(range(2, 6), TINY_WIDTHS[1:])]
        base = neck(feats)
        zeroed = [torch.zeros_like(feats[0])] + feats[1:]
        probed = neck(zeroed)
        assert not torch.allclose(base[0], probed[0])
        for n in (1, 2, 3):
            assert torch.equal(base[n], probed[n])
        # zeroing the deepest stage changes every output
        zeroed_deep = feats[:3] + [torch.zeros_like(feats[3])]
        probed_deep = neck(zeroed_deep)
        for n in range(4):
            assert not torch.allclose(base[n], probed_deep[n])


class TestResize:
    def test_identity_passthrough(self):
        x = torch.randn(1, 4, 3, 3)
        assert resize_to_grid(x, (3, 3)) is x

    def test_constant_preserved(self):
        x = torch.full((1, 2, 3, 3), 1.7)
        out = resize_to_grid(x, (7, 5))
        assert torch.allclose(out, torch.full((1, 2, 7, 5), 1.7))

    def test_monotone_upsample(self):
        x = torch.tensor([[0.0, 0.0], [1.0, 1.0]]).view(1, 1, 2, 2)
        out = resize_to_grid(x, (4, 4))[0, 0]
        for col in range(4):
            column = out[:, col]
            assert torch.all(column[1:] >= column[:-1])
        for row in range(4):
            assert torch.allclose(out[row], out[row, 0].expand(4))


class TestStageAttention:
    def test_weights_form_distribution(self):
        torch.manual_seed(5)
        fusion = StageAttentionFusion(8)
        e = torch.randn(10_000, 4, 8)
        _, w = fusion(e)
        assert torch.all(w >= 0)
        assert torch.allclose(w.sum(dim=-1), torch.ones(10_000), atol=1e-6)

    def test_forced_one_hot_identity(self):
        torch.manual_seed(6)
        fusion = StageAttentionFusion(8).double()
        e = torch.randn(5, 4, 8, dtype=torch.float64)
        forced = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        z, w = fusion(e, weights_override=forced)
        expected = fusion.out(e.sum(dim=1) + e[:, 0])
        assert torch.allclose(z, expected, atol=0.0)
        assert torch.equal(w, forced.expand(5, 4))

    def test_gradient_wrt_each_stage_input(self):
        torch.manual_seed(7)
        fusion = StageAttentionFusion(8).double()
        e = torch.randn(3, 4, 8, dtype=torch.float64, requires_grad=True)

        def loss_fn():
            z, _ = fusion(e)
            return (z**2).mean()

        loss_fn().backward()
        idxs, fd_vals = fd_gradient(loss_fn, e)
        assert max_rel_err(e.grad.view(-1), idxs, fd_vals) < 1e-4

    def test_fusion_variants_shapes(self):
        e = torch.randn(6, 4, 8)
        for cls in (AddFusion, ConcatFusion):
            z, w = cls(8)(e)
            assert z.shape == (6, 8)
            assert w is None


class TestPooling:
    def test_constant(self):
        x = torch.full((2, 3, 4, 4), 0.25)
        assert torch.allclose(pool_image_embedding(x), torch.full((2, 3), 0.25))

    def test_mean_value(self):
        x = torch.tensor([1.0, 2.0, 3.0, 4.0]).view(1, 1, 2, 2)
        assert pool_image_embedding(x).item() == pytest.approx(2.5)

    def test_permutation_invariant(self):
        torch.manual_seed(8)
        x = torch.randn(1, 4, 3, 3)
        perm = torch.randperm(9)
        shuffled = x.flatten(start_dim=2)[:, :, perm].view(1, 4, 3, 3)
        assert torch.allclose(pool_image_embedding(x), pool_image_embedding(shuffled), atol=1e-6)


class TestEncoder:
    def test_grid_shape_96(self):
        enc = tiny_encoder(d=8, patch_size=32)
        zp, zi = enc(torch.randn(2, 1, 96, 96))
        assert zp.shape == (2, 3, 3, 8)
        assert zi.shape == (2, 8)

    def test_paper_scale_shape(self):
        torch.manual_seed(0)
        enc = Encoder(1, TINY_WIDTHS, 1, d=128, patch_size=32)
        zp, zi = enc(torch.randn(1, 1, 384, 384))
        assert zp.shape == (1, 12, 12, 128)
        assert zi.shape == (1, 128)

    def test_deterministic(self):
        enc = tiny_encoder()
        img = torch.randn(1, 1, 96, 96)
        a = enc(img)
        b = enc(img.clone())
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_attention_simplex_through_encoder(self):
        enc = tiny_encoder()
        _, _, w = enc(torch.randn(2, 1, 96, 96), return_attention=True)
        assert torch.all(w >= 0)
        assert torch.allclose(w.sum(dim=-1), torch.ones_like(w.sum(dim=-1)), atol=1e-6)

    def test_init_scheme_zero_biases(self):
        enc = tiny_encoder()
        init_fan_in_uniform(enc)
        for name, p in enc.named_parameters():
            if name.endswith("bias") and ("conv" in name or "project" in name or
                                          "reduce" in name or "score" in name or "out" in name):
                assert torch.all(p == 0)

    def test_encoder_called_once_per_image_batch(self):
        enc = tiny_encoder()
        calls = []
        orig = enc.backbone.forward
        enc.backbone.forward = lambda x: (calls.append(1), orig(x))[1]
        enc(torch.randn(4, 1, 96, 96))
        assert len(calls) == 1
