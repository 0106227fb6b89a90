"""Conditioning block tests: analytic hand cases, scalar-loop oracles,
no-op-at-init guarantees, and finite-difference gradient checks."""

import math

import numpy as np
import pytest
import torch

from rescomp.conditioning import (
    EMBED_DIM,
    PRE_SCALES,
    CaptionCrossAttention,
    EmbeddingSet,
    EMod,
    GlobalAdaptorBlock,
    LocalModulator,
    ParamEmbeddingMLP,
    SemanticAttention,
    _attend,
    fuse_global_embedding,
    positional_encode,
    zero_linear_,
)

SILU1 = 1.0 / (1.0 + math.exp(-1.0))


def gradcheck_module(module, *args):
    """Finite-difference check of gradients w.r.t. every trainable weight."""
    module = module.double()
    names = [n for n, p in module.named_parameters() if p.requires_grad]
    params = tuple(
        p.detach().clone().requires_grad_(True)
        for p in module.parameters()
        if p.requires_grad
    )

    def fn(*ps):
        return torch.func.functional_call(module, dict(zip(names, ps)), args)

    return torch.autograd.gradcheck(fn, params, eps=1e-5, atol=1e-6, rtol=1e-4)


class TestPositionalEncode:
    def test_zero(self):
        pe = positional_encode(0.0, 16)
        assert torch.equal(pe[0::2], torch.zeros(8))
        assert torch.equal(pe[1::2], torch.ones(8))

    def test_pi(self):
        pe = positional_encode(math.pi, 8)
        assert float(pe[0]) == pytest.approx(0.0, abs=1e-6)
        assert float(pe[1]) == pytest.approx(-1.0, abs=1e-6)

    def test_frequency_ladder(self):
        pe = positional_encode(7.5, 128)
        assert float(pe[0]) == pytest.approx(math.sin(7.5), abs=1e-6)
        assert float(pe[1]) == pytest.approx(math.cos(7.5), abs=1e-6)
        # index 64 pairs with frequency divisor 10000**(64/128) = 100
        assert float(pe[64]) == pytest.approx(math.sin(0.075), abs=1e-6)
        assert float(pe[65]) == pytest.approx(math.cos(0.075), abs=1e-6)

    def test_rejects_odd_dim(self):
        with pytest.raises(ValueError):
            positional_encode(1.0, 7)

    def test_batched(self):
        pe = positional_encode(torch.tensor([0.0, 1.0, 2.0]), 32)
        assert pe.shape == (3, 32)
        assert torch.equal(pe[0, 0::2], torch.zeros(16))


class TestParamEmbedding:
    def test_pre_scales(self):
        assert PRE_SCALES == {"ct": 100.0, "qp": 1000.0, "s": 100.0, "t": 1.0}
        assert ParamEmbeddingMLP("qp").pre_scale == 1000.0
        with pytest.raises(ValueError):
            ParamEmbeddingMLP("nope")

    def test_zero_weights_zero_output(self):
        mlp = ParamEmbeddingMLP("ct", dim=32)
        zero_linear_(mlp.lin1)
        zero_linear_(mlp.lin2)
        for p in (0.0, 0.5, 1.0, 123.0):
            assert torch.equal(mlp(p), torch.zeros(32))

    def test_identity_layers_silu_pattern(self):
        mlp = ParamEmbeddingMLP("t", dim=16)
        with torch.no_grad():
            for lin in (mlp.lin1, mlp.lin2):
                lin.weight.copy_(torch.eye(16))
                lin.bias.zero_()
        out = mlp(0.0)
        # PE(0) alternates 0/1; SiLU(0) = 0, SiLU(1) = 1/(1+e^-1).
        assert torch.allclose(out[0::2], torch.zeros(8), atol=1e-7)
        assert torch.allclose(out[1::2], torch.full((8,), SILU1), atol=1e-6)

    def test_seed0_scale_fixture(self):
        mlp = ParamEmbeddingMLP("s", seed=0)
        with torch.no_grad():
            v = mlp(1.5)
        np.testing.assert_allclose(
            v[:4].numpy(),
            [0.4272738993167877, 0.14944252371788025, 0.3099279999732971, 0.05839771404862404],
            atol=1e-5,
        )
        assert float(v.sum()) == pytest.approx(3.299931764602661, abs=1e-4)

    def test_batched_params(self):
        mlp = ParamEmbeddingMLP("s", dim=32, seed=1)
        out = mlp(torch.tensor([1.0, 1.5, 2.0]))
        assert out.shape == (3, 32)
        single = mlp(1.5)
        assert torch.allclose(out[1], single, atol=1e-6)

    def test_gradcheck(self):
        mlp = ParamEmbeddingMLP("s", dim=8, seed=2)
        assert gradcheck_module(mlp, 1.3)


class TestEmbeddingSet:
    def test_distinct_consumers_independent(self):
        backbone = EmbeddingSet(dim=16, seed=10)
        fidelity = EmbeddingSet(dim=16, seed=20)
        ge_before = fidelity.global_embedding(0.0, 0.1, 1.5).detach().clone()
        with torch.no_grad():
            backbone.s.lin2.weight.add_(1.0)
        ge_after = fidelity.global_embedding(0.0, 0.1, 1.5)
        assert torch.equal(ge_before, ge_after)

    def test_fuse_is_sum(self):
        es = EmbeddingSet(dim=16, seed=3)
        ge = es.global_embedding(1.0, 0.05, 2.0)
        want = es.ct(1.0) + es.qp(0.05) + es.s(2.0)
        assert torch.allclose(ge, want, atol=1e-7)


class TestFuse:
    def test_zeros(self):
        z = torch.zeros(8)
        assert torch.equal(fuse_global_embedding(z, z, z), z)

    def test_unit_basis(self):
        e = torch.eye(8)
        out = fuse_global_embedding(e[0], e[1], e[2])
        want = torch.zeros(8)
        want[:3] = 1.0
        assert torch.equal(out, want)

    def test_permutation_invariant(self):
        g = torch.Generator().manual_seed(0)
        a, b, c = (torch.randn(8, generator=g) for _ in range(3))
        assert torch.allclose(
            fuse_global_embedding(a, b, c), fuse_global_embedding(c, a, b)
        )

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            fuse_global_embedding(torch.zeros(8), torch.zeros(8), torch.zeros(6))


class TestGlobalAdaptor:
    def test_zero_convs_pure_residual(self):
        for pre in (True, False):
            block = GlobalAdaptorBlock(4, emb_dim=8, pre_norm_act=pre)
            with torch.no_grad():
                block.conv1.weight.zero_()
                block.conv1.bias.zero_()
                block.conv2.weight.zero_()
                block.conv2.bias.zero_()
                block.proj_t.weight.zero_()
                block.proj_t.bias.zero_()
            f = torch.randn(2, 4, 5, 5, generator=torch.Generator().manual_seed(1))
            out = block(f, torch.zeros(8), torch.zeros(8))
            assert torch.equal(out, f)

    def test_zero_conv2_blocks_ge(self):
        block = GlobalAdaptorBlock(4, emb_dim=8, seed=5)
        with torch.no_grad():
            block.conv2.weight.zero_()
            block.conv2.bias.zero_()
            block.proj_ge.weight.fill_(0.3)  # GE path live but gated by conv2
        f = torch.randn(1, 4, 6, 6, generator=torch.Generator().manual_seed(2))
        t = torch.randn(8, generator=torch.Generator().manual_seed(3))
        out1 = block(f, t, torch.zeros(8))
        out2 = block(f, t, torch.ones(8))
        assert torch.equal(out1, f) and torch.equal(out2, f)

    def test_hand_composed_scalar_case(self):
        # Bare composition: conv2(conv1(F_u) + t + ge) + F_u with identity
        # 3x3 convs (center tap 1), t contribution 0, ge projection 0.5.
        block = GlobalAdaptorBlock(1, emb_dim=4, pre_norm_act=False)
        with torch.no_grad():
            for conv in (block.conv1, block.conv2):
                conv.weight.zero_()
                conv.weight[0, 0, 1, 1] = 1.0
                conv.bias.zero_()
            block.proj_t.weight.zero_()
            block.proj_t.bias.zero_()
            block.proj_ge.weight.zero_()
            block.proj_ge.bias.fill_(0.5)
        f = torch.full((1, 1, 1, 1), 2.0)
        with torch.no_grad():
            out = block(f, torch.zeros(4), torch.zeros(4))
        # F_G = F_u + (F_u + 0.5) = 2 + 2.5
        assert float(out) == pytest.approx(4.5, abs=1e-7)

    def test_fresh_block_ignores_ge(self):
        block = GlobalAdaptorBlock(4, emb_dim=8, seed=6)
        f = torch.randn(1, 4, 4, 4, generator=torch.Generator().manual_seed(4))
        t = torch.randn(8, generator=torch.Generator().manual_seed(5))
        out1 = block(f, t, torch.zeros(8))
        out2 = block(f, t, 100.0 * torch.ones(8))
        assert torch.equal(out1, out2)  # proj_ge starts at exact zero

    def test_scale_sensitivity_with_live_projection(self):
        block = GlobalAdaptorBlock(4, emb_dim=16, seed=7)
        with torch.no_grad():
            block.proj_ge.weight.normal_(
                0, 0.1, generator=torch.Generator().manual_seed(6)
            )
        embs = EmbeddingSet(dim=16, seed=8)
        f = torch.randn(1, 4, 4, 4, generator=torch.Generator().manual_seed(7))
        t = torch.randn(16, generator=torch.Generator().manual_seed(8))
        out1 = block(f, t, embs.global_embedding(0.0, 0.08, 1.0))
        out2 = block(f, t, embs.global_embedding(0.0, 0.08, 2.0))
        assert float((out1 - out2).detach().abs().max()) > 0.0

    def test_shape_preserved(self):
        block = GlobalAdaptorBlock(6, emb_dim=8, seed=9)
        f = torch.randn(3, 6, 7, 5)
        assert block(f, torch.zeros(8), torch.zeros(8)).shape == f.shape

    def test_gradcheck(self):
        block = GlobalAdaptorBlock(4, emb_dim=6, seed=10)
        f = torch.randn(1, 4, 3, 3, generator=torch.Generator().manual_seed(9)).double()
        t = torch.randn(6, generator=torch.Generator().manual_seed(10)).double()
        ge = torch.randn(6, generator=torch.Generator().manual_seed(11)).double()
        assert gradcheck_module(block, f, t, ge)


class TestEMod:
    def test_identity_at_init(self):
        mod = EMod(channels=5, emb_dim=8)
        f = torch.randn(2, 5, 3, 3, generator=torch.Generator().manual_seed(0))
        emb = torch.randn(8, generator=torch.Generator().manual_seed(1))
        assert torch.equal(mod(f, emb), f)

    def test_constant_override(self):
        mod = EMod(channels=3, emb_dim=4)
        with torch.no_grad():
            mod.lin_alpha.bias.zero_()  # alpha = 0
            mod.lin_beta.bias.fill_(0.7)
        f = torch.randn(1, 3, 2, 2)
        out = mod(f, torch.zeros(4))
        assert torch.allclose(out, torch.full_like(f, 0.7))

    def test_two_channel_hand_case(self):
        mod = EMod(channels=2, emb_dim=4)
        with torch.no_grad():
            mod.lin_alpha.bias.copy_(torch.tensor([0.5, -1.0]))
            mod.lin_beta.bias.copy_(torch.tensor([1.0, 0.0]))
        f = torch.tensor([[[[2.0]], [[3.0]]]])
        out = mod(f, torch.zeros(4))
        assert out.squeeze().tolist() == [2.0, -3.0]

    def test_batched_embeddings(self):
        mod = EMod(channels=3, emb_dim=6)
        with torch.no_grad():
            mod.lin_alpha.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(2))
        f = torch.randn(4, 3, 2, 2)
        emb = torch.randn(4, 6)
        out = mod(f, emb)
        assert out.shape == f.shape
        single = mod(f[1:2], emb[1])
        assert torch.allclose(out[1:2], single, atol=1e-6)

    def test_gradcheck(self):
        mod = EMod(channels=3, emb_dim=4)
        f = torch.randn(2, 3, 2, 2).double()
        emb = torch.randn(2, 4).double()
        assert gradcheck_module(mod, f, emb)


def scalar_local_modulator(f, embs, weights):
    """Loop reimplementation of serial-ct then parallel-(qp, s) averaging."""
    b, c, h, w = f.shape
    out = np.zeros((b, c, h, w))
    (aw_ct, ab_ct, bw_ct, bb_ct), (aw_qp, ab_qp, bw_qp, bb_qp), (aw_s, ab_s, bw_s, bb_s) = weights
    ct, qp, s = embs
    for n in range(b):
        for ch in range(c):
            a_ct = float(aw_ct[ch] @ ct + ab_ct[ch])
            b_ct = float(bw_ct[ch] @ ct + bb_ct[ch])
            a_qp = float(aw_qp[ch] @ qp + ab_qp[ch])
            b_qp = float(bw_qp[ch] @ qp + bb_qp[ch])
            a_s = float(aw_s[ch] @ s + ab_s[ch])
            b_s = float(bw_s[ch] @ s + bb_s[ch])
            for i in range(h):
                for j in range(w):
                    fp = a_ct * float(f[n, ch, i, j]) + b_ct
                    out[n, ch, i, j] = 0.5 * ((a_qp * fp + b_qp) + (a_s * fp + b_s))
    return out


class TestLocalModulator:
    def test_identity_configuration(self):
        mod = LocalModulator(channels=4, emb_dim=8)
        f = torch.randn(2, 4, 3, 3, generator=torch.Generator().manual_seed(3))
        z = torch.zeros(8)
        assert torch.equal(mod(f, z, z, z), f)

    def test_dead_scale_branch_halves(self):
        mod = LocalModulator(channels=4, emb_dim=8)
        with torch.no_grad():
            mod.mod_s.lin_alpha.bias.zero_()  # alpha_s = 0, beta_s = 0
        f = torch.randn(1, 4, 2, 2, generator=torch.Generator().manual_seed(4))
        z = torch.zeros(8)
        out = mod(f, z, z, z)
        assert torch.allclose(out, 0.5 * f, atol=1e-7)

    def test_matches_scalar_oracle(self):
        torch.manual_seed(11)
        mod = LocalModulator(channels=2, emb_dim=3).double()
        with torch.no_grad():
            for emod in (mod.mod_ct, mod.mod_qp, mod.mod_s):
                emod.lin_alpha.weight.normal_(0, 0.5)
                emod.lin_alpha.bias.normal_(0, 0.5)
                emod.lin_beta.weight.normal_(0, 0.5)
                emod.lin_beta.bias.normal_(0, 0.5)
        f = torch.randn(1, 2, 2, 2).double()
        ct, qp, s = (torch.randn(3).double() for _ in range(3))
        got = mod(f, ct, qp, s).detach().numpy()
        weights = [
            (
                e.lin_alpha.weight.detach().numpy(),
                e.lin_alpha.bias.detach().numpy(),
                e.lin_beta.weight.detach().numpy(),
                e.lin_beta.bias.detach().numpy(),
            )
            for e in (mod.mod_ct, mod.mod_qp, mod.mod_s)
        ]
        want = scalar_local_modulator(
            f.numpy(), (ct.numpy(), qp.numpy(), s.numpy()), weights
        )
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_gradcheck(self):
        mod = LocalModulator(channels=2, emb_dim=3)
        f = torch.randn(1, 2, 2, 2).double()
        ct, qp, s = (torch.randn(3).double() for _ in range(3))
        assert gradcheck_module(mod, f, ct, qp, s)


class TestSemanticAttention:
    def test_softmax_rows_normalized(self):
        g = torch.Generator().manual_seed(5)
        q = torch.randn(1, 6, 4, generator=g)
        k = torch.randn(1, 3, 4, generator=g)
        rows = _attend(q, k, torch.eye(3)[None])
        sums = rows.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_zero_value_projection_is_noop(self):
        attn = SemanticAttention(channels=4, sem_channels=8, seed=12)
        f_u = torch.randn(2, 4, 3, 3, generator=torch.Generator().manual_seed(6))
        f_sem = torch.randn(2, 8, 2, 2, generator=torch.Generator().manual_seed(7))
        assert torch.equal(attn(f_u, f_sem), f_u)

    def test_identical_keys_average_values(self):
        attn = SemanticAttention(channels=3, sem_channels=3, seed=13)
        with torch.no_grad():
            attn.w_v.weight.copy_(torch.eye(3))
        f_u = torch.zeros(1, 3, 1, 1)  # single query
        token = torch.tensor([0.3, -0.7, 1.1])
        f_sem = token[None, :, None, None].repeat(1, 1, 2, 1)  # two equal tokens
        out = attn(f_u, f_sem)
        assert torch.allclose(out[0, :, 0, 0], token, atol=1e-6)

    def test_shape_preserved(self):
        attn = SemanticAttention(channels=4, sem_channels=6, seed=14)
        f_u = torch.randn(2, 4, 5, 3)
        f_sem = torch.randn(2, 6, 2, 2)
        assert attn(f_u, f_sem).shape == f_u.shape

    def test_gradcheck(self):
        attn = SemanticAttention(channels=3, sem_channels=4, seed=15)
        f_u = torch.randn(1, 3, 2, 2).double()
        f_sem = torch.randn(1, 4, 2, 2).double()
        assert gradcheck_module(attn, f_u, f_sem)


class TestCaptionCrossAttention:
    def test_fresh_module_is_noop(self):
        attn = CaptionCrossAttention(channels=4, token_dim=8, seed=16)
        f = torch.randn(2, 4, 3, 3, generator=torch.Generator().manual_seed(8))
        tokens = torch.randn(2, 5, 8, generator=torch.Generator().manual_seed(9))
        assert torch.equal(attn(f, tokens), f)

    def test_live_output_projection_uses_caption(self):
        attn = CaptionCrossAttention(channels=4, token_dim=8, seed=17)
        with torch.no_grad():
            attn.w_o.weight.copy_(torch.eye(4))
        f = torch.randn(1, 4, 2, 2, generator=torch.Generator().manual_seed(10))
        t1 = torch.randn(1, 3, 8, generator=torch.Generator().manual_seed(11))
        t2 = torch.randn(1, 3, 8, generator=torch.Generator().manual_seed(12))
        assert not torch.equal(attn(f, t1), attn(f, t2))

    def test_unbatched_tokens(self):
        attn = CaptionCrossAttention(channels=4, token_dim=8, seed=18)
        f = torch.randn(3, 4, 2, 2)
        out = attn(f, torch.randn(5, 8))
        assert out.shape == f.shape

    def test_gradcheck(self):
        attn = CaptionCrossAttention(channels=3, token_dim=4, seed=19)
        f = torch.randn(1, 3, 2, 2).double()
        tokens = torch.randn(1, 2, 4).double()
        assert gradcheck_module(attn, f, tokens)
