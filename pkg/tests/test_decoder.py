"""Tests for the latent autoencoder, noise schedule, conditioned denoiser,
fidelity branch, sampling loop, parameter groups, and checkpoint format."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rescomp import checkpoint, corpus, losses, semantics
from rescomp.decoder import (
    C_LAT,
    WIDTHS,
    FidelityModule,
    ImageDecoder,
    ImageEncoder,
    NoiseSchedule,
    RestorationModel,
    ToRGBHeads,
    forward_noising,
    latent_dims,
    np_to_batch,
    sampling_timesteps,
)
from rescomp.errors import StreamFormatError


def ceil_div(n, k):
    return (n + k - 1) // k


@pytest.fixture(scope="module")
def model():
    """Freshly constructed model, shared read-only across tests."""
    return RestorationModel()


@pytest.fixture(scope="module")
def cond_inputs():
    img = corpus.synthetic_image(7, 64, 64)
    tokens = semantics.caption_tokenize("a small test scene")
    feats = semantics.FrozenConvSemanticProvider()(img).array
    return img, tokens, feats


def make_cond(model, img, tokens, feats, ct=0.0, qp=36.0, s=1.5):
    return model.make_conditioning(img, ct, qp, s, tokens, feats)


class TestLatentDims:
    def test_multiple_of_eight(self):
        assert latent_dims(64, 64) == (8, 8)

    def test_ceil_chain(self):
        # 65 -> 33 -> 17 -> 9; 67 -> 34 -> 17 -> 9
        assert latent_dims(65, 67) == (9, 9)

    def test_minimum(self):
        assert latent_dims(8, 8) == (1, 1)

    @given(h=st.integers(8, 400), w=st.integers(8, 400))
    def test_matches_repeated_ceil_halving(self, h, w):
        eh, ew = h, w
        for _ in range(3):
            eh, ew = ceil_div(eh, 2), ceil_div(ew, 2)
        assert latent_dims(h, w) == (eh, ew)


class TestImageEncoder:
    def test_shape_law_64(self):
        enc = ImageEncoder(seed=1)
        z, feats = enc(torch.zeros(1, 3, 64, 64))
        assert z.shape == (1, C_LAT, 8, 8)
        assert feats.f1.shape == (1, WIDTHS[0], 32, 32)
        assert feats.f2.shape == (1, WIDTHS[1], 16, 16)
        assert feats.f3.shape == (1, WIDTHS[2], 8, 8)

    def test_odd_dims_ceil(self):
        enc = ImageEncoder(seed=1)
        z, feats = enc(torch.zeros(1, 3, 65, 67))
        assert feats.f1.shape[-2:] == (33, 34)
        assert feats.f2.shape[-2:] == (17, 17)
        assert feats.f3.shape[-2:] == (9, 9)
        assert z.shape[-2:] == (9, 9)

    def test_too_small_raises(self):
        enc = ImageEncoder(seed=1)
        with pytest.raises(ValueError, match="dims"):
            enc(torch.zeros(1, 3, 7, 64))

    def test_zero_image_zero_bias_gives_zero_everything(self):
        enc = ImageEncoder(seed=3)
        with torch.no_grad():
            for conv in (enc.stage1, enc.stage2, enc.stage3, enc.head):
                conv.bias.zero_()
        with torch.no_grad():
            z, feats = enc(torch.zeros(1, 3, 16, 16))
        assert float(z.abs().max()) == 0.0
        for f in feats.as_list():
            assert float(f.abs().max()) == 0.0

    def test_frozen_first_run_fixture(self):
        img = corpus.synthetic_image(2024, 16, 16)
        enc = ImageEncoder(seed=11)
        with torch.no_grad():
            z, _ = enc(np_to_batch(img))
        got = [float(v) for v in z.flatten()[:4]]
        want = [
            -0.00131244957447052,
            -0.006087528076022863,
            -0.012258859351277351,
            -0.014324125833809376,
        ]
        np.testing.assert_allclose(got, want, atol=1e-5)
        assert float(z.sum()) == pytest.approx(-0.20203116536140442, abs=1e-4)

    def test_seed_determinism(self):
        a = ImageEncoder(seed=9)
        b = ImageEncoder(seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestImageDecoder:
    def test_roundtrip_dims(self):
        enc, dec = ImageEncoder(seed=1), ImageDecoder(seed=2)
        for h, w in [(64, 64), (65, 67), (40, 56)]:
            x = torch.rand(1, 3, h, w)
            z, _ = enc(x)
            y = dec(z, out_hw=(h, w))
            assert y.shape == (1, 3, h, w)

    def test_all_zero_params_constant_output(self):
        dec = ImageDecoder()
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
        y = dec(torch.randn(1, C_LAT, 4, 4))
        assert torch.equal(y, torch.zeros_like(y))

    def test_final_bias_sets_constant_level(self):
        dec = ImageDecoder()
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
            dec.up3.bias.fill_(0.5)
        y = dec(torch.randn(2, C_LAT, 4, 4))
        assert torch.equal(y, torch.full_like(y, 0.5))

    def test_output_clamped(self):
        dec = ImageDecoder(seed=2)
        y = dec(10.0 * torch.randn(1, C_LAT, 6, 6)).detach()
        assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0

    def test_out_hw_exceeding_decoded_dims_raises(self):
        dec = ImageDecoder(seed=2)
        with pytest.raises(ValueError, match="exceed"):
            dec(torch.randn(1, C_LAT, 4, 4), out_hw=(33, 32))


class TestToRGB:
    def test_zero_weights_zero_image(self):
        heads = ToRGBHeads()
        with torch.no_grad():
            for p in heads.parameters():
                p.zero_()
        out = heads(torch.randn(1, WIDTHS[0], 5, 5), 1)
        assert torch.equal(out, torch.zeros_like(out))

    def test_channel_select_weights(self):
        heads = ToRGBHeads()
        with torch.no_grad():
            for p in heads.parameters():
                p.zero_()
            for k in range(3):
                heads.heads[1].weight[k, k, 0, 0] = 1.0
        f = torch.randn(1, WIDTHS[1], 6, 7)
        out = heads(f, 2)
        assert torch.equal(out, f[:, :3])

    def test_bad_level(self):
        heads = ToRGBHeads(seed=0)
        with pytest.raises(ValueError, match="level"):
            heads(torch.randn(1, WIDTHS[0], 4, 4), 0)
        with pytest.raises(ValueError, match="level"):
            heads(torch.randn(1, WIDTHS[0], 4, 4), 4)

    def test_frozen_first_run_fixture(self):
        img = corpus.synthetic_image(2024, 16, 16)
        enc = ImageEncoder(seed=11)
        heads = ToRGBHeads(seed=13)
        with torch.no_grad():
            _, feats = enc(np_to_batch(img))
            out = heads(feats.f1, 1)
        got = [float(v) for v in out.flatten()[:4]]
        want = [
            0.159999281167984,
            0.06634366512298584,
            0.07763782888650894,
            0.08803653717041016,
        ]
        np.testing.assert_allclose(got, want, atol=1e-5)
        assert float(out.sum()) == pytest.approx(9.149452209472656, abs=1e-3)


class TestNoiseSchedule:
    def test_linear_defaults(self):
        s = NoiseSchedule.linear()
        assert s.T == 1000
        assert s.betas[0] == pytest.approx(1e-4)
        assert s.betas[-1] == pytest.approx(2e-2)

    def test_monotonicity(self):
        s = NoiseSchedule.linear()
        assert (np.diff(s.betas) > 0).all()
        assert (np.diff(s.alphas_cumprod) < 0).all()

    def test_terminal_alpha_small(self):
        s = NoiseSchedule.linear()
        assert s.alphas_cumprod[-1] < 0.05
        assert s.alphas_cumprod[-1] == pytest.approx(4.035829765375676e-05, rel=1e-9)

    def test_cumprod_matches_loop(self):
        s = NoiseSchedule.linear(t=50)
        acc = 1.0
        for beta, abar in zip(s.betas, s.alphas_cumprod):
            acc *= 1.0 - beta
            assert abar == pytest.approx(acc, rel=1e-12)

    def test_validation(self):
        good = NoiseSchedule.linear(t=10)
        with pytest.raises(ValueError, match="increasing"):
            NoiseSchedule(
                betas=good.betas[::-1].copy(), alphas_cumprod=good.alphas_cumprod
            )
        with pytest.raises(ValueError, match="inside"):
            NoiseSchedule(
                betas=np.linspace(0.0, 0.5, 10), alphas_cumprod=good.alphas_cumprod
            )
        with pytest.raises(ValueError, match="decreasing"):
            NoiseSchedule(
                betas=good.betas, alphas_cumprod=good.alphas_cumprod[::-1].copy()
            )


class TestForwardNoising:
    def setup_method(self):
        self.sched = NoiseSchedule.linear()

    def test_t0_coefficients(self):
        z0 = torch.randn(1, C_LAT, 4, 4)
        eps = torch.randn(1, C_LAT, 4, 4)
        zt = forward_noising(z0, 0, eps, self.sched)
        want = math.sqrt(0.9999) * z0 + math.sqrt(0.0001) * eps
        assert torch.equal(zt, want)

    def test_zero_eps(self):
        z0 = torch.randn(2, C_LAT, 3, 3)
        zt = forward_noising(z0, 500, torch.zeros_like(z0), self.sched)
        abar = float(self.sched.alphas_cumprod[500])
        assert torch.allclose(zt, math.sqrt(abar) * z0, atol=0, rtol=0)

    def test_zero_z0(self):
        eps = torch.randn(2, C_LAT, 3, 3)
        zt = forward_noising(torch.zeros_like(eps), 500, eps, self.sched)
        abar = float(self.sched.alphas_cumprod[500])
        assert torch.equal(zt, math.sqrt(1.0 - abar) * eps)

    @pytest.mark.parametrize("t", [0, 1, 317, 999])
    def test_matches_scalar_implementation(self, t):
        rng = np.random.default_rng(t)
        z0 = rng.standard_normal((1, 2, 3, 3))
        eps = rng.standard_normal((1, 2, 3, 3))
        zt = forward_noising(
            torch.from_numpy(z0), t, torch.from_numpy(eps), self.sched
        ).numpy()
        abar = self.sched.alphas_cumprod[t]
        expect = np.empty_like(z0)
        for idx in np.ndindex(z0.shape):
            expect[idx] = math.sqrt(abar) * z0[idx] + math.sqrt(1 - abar) * eps[idx]
        np.testing.assert_allclose(zt, expect, rtol=1e-15)

    def test_t_out_of_range(self):
        z = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ValueError, match="t must"):
            forward_noising(z, -1, z, self.sched)
        with pytest.raises(ValueError, match="t must"):
            forward_noising(z, 1000, z, self.sched)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            forward_noising(
                torch.zeros(1, 1, 2, 2), 0, torch.zeros(1, 1, 2, 3), self.sched
            )


class TestSamplingTimesteps:
    def test_single_step(self):
        assert sampling_timesteps(1000, 1) == [999]

    def test_two_steps(self):
        assert sampling_timesteps(1000, 2) == [999, 0]

    def test_full_schedule(self):
        assert sampling_timesteps(1000, 1000) == list(range(999, -1, -1))

    @pytest.mark.parametrize("steps", [5, 20, 50])
    def test_grid_properties(self, steps):
        ts = sampling_timesteps(1000, steps)
        assert len(ts) == steps
        assert ts[0] == 999 and ts[-1] == 0
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert all(0 <= t < 1000 for t in ts)

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="steps"):
            sampling_timesteps(1000, 0)
        with pytest.raises(ValueError, match="steps"):
            sampling_timesteps(1000, 1001)


class TestFidelityModule:
    def test_zero_init_outputs(self):
        fid = FidelityModule(seed=40)
        gen = torch.Generator().manual_seed(5)
        zlat = torch.randn(1, C_LAT, 8, 8, generator=gen)
        zt = torch.randn(1, C_LAT, 8, 8, generator=gen)
        outs = fid(zlat, zt, 10, 0.0, 36.0, 1.5)
        assert len(outs) == 3
        assert [tuple(o.shape) for o in outs] == [
            (1, WIDTHS[0], 8, 8),
            (1, WIDTHS[1], 4, 4),
            (1, WIDTHS[2], 2, 2),
        ]
        for o in outs:
            assert torch.equal(o, torch.zeros_like(o))

    def test_shape_mismatch(self):
        fid = FidelityModule(seed=40)
        with pytest.raises(ValueError, match="guide latent"):
            fid(
                torch.zeros(1, C_LAT, 8, 8),
                torch.zeros(1, C_LAT, 4, 4),
                0,
                0.0,
                36.0,
                1.0,
            )

    def test_frozen_first_run_fixture(self):
        """Pin the encoder-path features by replacing the zero projections
        with identity 1x1 convs."""
        fid = FidelityModule(seed=40)
        gen = torch.Generator().manual_seed(5)
        zlat = torch.randn(1, C_LAT, 8, 8, generator=gen)
        zt = torch.randn(1, C_LAT, 8, 8, generator=gen)
        with torch.no_grad():
            for conv in (fid.out1, fid.out2, fid.out3):
                w = torch.zeros_like(conv.weight)
                for i in range(w.shape[0]):
                    w[i, i, 0, 0] = 1.0
                conv.weight.copy_(w)
            outs = fid(zlat, zt, 10, 0.0, 36.0, 1.5)
        got = [float(v) for v in outs[2].flatten()[:4]]
        want = [
            0.13642504811286926,
            -0.5478826761245728,
            0.4042876362800598,
            -0.10963356494903564,
        ]
        np.testing.assert_allclose(got, want, atol=1e-5)
        assert float(outs[2].sum()) == pytest.approx(8.87382984161377, abs=1e-3)

    def test_clone_backbone_weights(self, model):
        fid = FidelityModule(seed=99)
        assert not torch.equal(fid.in_conv.weight, model.backbone.in_conv.weight)
        fid.clone_backbone_weights(model.backbone)
        assert torch.equal(fid.in_conv.weight, model.backbone.in_conv.weight)
        assert torch.equal(fid.down2.weight, model.backbone.down2.weight)
        assert torch.equal(
            fid.block3.conv1.weight, model.backbone.block3.conv1.weight
        )


class TestPredictNoise:
    def test_noop_at_init(self, model, cond_inputs):
        """A fresh model's conditioning is exactly inert: every injection
        path ends in a zero projection."""
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(1, C_LAT, 8, 8, generator=gen)
        with torch.no_grad():
            full = model.predict_noise(z, 123, cond)
            bare = model.predict_noise(z, 123, None)
        assert torch.equal(full, bare)

    def test_noop_invariant_to_params(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        gen = torch.Generator().manual_seed(1)
        z = torch.randn(1, C_LAT, 8, 8, generator=gen)
        with torch.no_grad():
            a = model.predict_noise(z, 50, make_cond(model, img, tokens, feats, 0.0, 6.0, 1.0))
            b = model.predict_noise(z, 50, make_cond(model, img, tokens, feats, 1.0, 66.0, 2.0))
        assert torch.equal(a, b)

    def test_output_shape(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        z = torch.randn(1, C_LAT, 8, 8)
        with torch.no_grad():
            out = model.predict_noise(z, 10, cond)
        assert out.shape == z.shape

    def test_explicit_fidelity_features_used(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        cond.fidelity_features = [
            torch.zeros(1, WIDTHS[0], 8, 8),
            torch.zeros(1, WIDTHS[1], 4, 4),
            torch.zeros(1, WIDTHS[2], 2, 2),
        ]
        cond.x_g_up_latent = None
        z = torch.randn(1, C_LAT, 8, 8)
        with torch.no_grad():
            out = model.predict_noise(z, 10, cond)
            bare = model.predict_noise(z, 10, None)
        assert torch.equal(out, bare)

    def test_missing_fidelity_raises(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        cond.x_g_up_latent = None
        cond.fidelity_features = None
        with pytest.raises(ValueError, match="fidelity"):
            model.predict_noise(torch.randn(1, C_LAT, 8, 8), 10, cond)

    def test_s_sensitivity_with_live_ge_projection(self, cond_inputs):
        """Once any GE projection is nonzero, the prediction must react to
        the rescaling factor."""
        img, tokens, feats = cond_inputs
        m = RestorationModel(seed=3)
        with torch.no_grad():
            m.backbone.block3.proj_ge.weight.normal_(0.0, 0.05)
        z = torch.randn(1, C_LAT, 8, 8)
        with torch.no_grad():
            a = m.predict_noise(z, 77, make_cond(m, img, tokens, feats, s=1.0))
            b = m.predict_noise(z, 77, make_cond(m, img, tokens, feats, s=2.0))
        assert float((a - b).abs().max()) > 0


class TestSample:
    def test_same_seed_identical(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        a = model.sample(cond, steps=3, seed=11, out_hw=(64, 64))
        b = model.sample(cond, steps=3, seed=11, out_hw=(64, 64))
        assert torch.equal(a, b)

    def test_different_seed_differs(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        a = model.sample(cond, steps=2, seed=11, out_hw=(64, 64))
        b = model.sample(cond, steps=2, seed=12, out_hw=(64, 64))
        assert not torch.equal(a, b)

    def test_single_step_closed_form(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        got = model.sample(cond, steps=1, seed=5, out_hw=(64, 64))
        gen = torch.Generator().manual_seed(5)
        z = torch.randn(1, C_LAT, 8, 8, generator=gen)
        with torch.no_grad():
            eps = model.predict_noise(z, 999, cond)
            abar = float(model.schedule.alphas_cumprod[999])
            x0 = (z - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
            want = model.decode_latent(x0, (64, 64))
        assert torch.equal(got, want)

    def test_output_contract_odd_dims(self, model):
        """Guide image, latent grid, and output dims stay consistent for
        sizes that are not multiples of 8."""
        img = corpus.synthetic_image(9, 36, 44)
        tokens = semantics.caption_tokenize("odd dims")
        feats = semantics.FrozenConvSemanticProvider()(img).array
        cond = make_cond(model, img, tokens, feats)
        out = model.sample(cond, steps=2, seed=0, out_hw=(36, 44))
        assert out.shape == (1, 3, 36, 44)
        assert torch.isfinite(out).all()
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_guide_dims_must_match_output(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        with pytest.raises(ValueError, match="guide latent"):
            model.sample(cond, steps=1, seed=0, out_hw=(36, 44))

    def test_steps_out_of_range(self, model, cond_inputs):
        img, tokens, feats = cond_inputs
        cond = make_cond(model, img, tokens, feats)
        with pytest.raises(ValueError, match="steps"):
            model.sample(cond, steps=0, seed=0, out_hw=(64, 64))


class TestParameterGroups:
    GROUPS = {
        "embeddings",
        "fidelity",
        "image_encoder",
        "local_modulator",
        "attention",
        "frozen",
    }

    def test_names(self, model):
        assert set(model.parameter_groups()) == self.GROUPS

    def test_disjoint_and_exhaustive(self, model):
        groups = model.parameter_groups()
        seen: dict[int, str] = {}
        for name, params in groups.items():
            for p in params:
                assert id(p) not in seen, f"{name} overlaps {seen.get(id(p))}"
                seen[id(p)] = name
        all_ids = {id(p) for p in model.parameters()}
        assert set(seen) == all_ids

    def test_freezing_policy(self, model):
        model.apply_freezing_policy()
        groups = model.parameter_groups()
        for p in groups["frozen"]:
            assert not p.requires_grad
        for name, params in groups.items():
            if name == "frozen":
                continue
            for p in params:
                assert p.requires_grad

    def test_trainable_excludes_frozen(self, model):
        frozen_ids = {id(p) for p in model.parameter_groups()["frozen"]}
        trainable_ids = {id(p) for p in model.trainable_parameters()}
        assert not (frozen_ids & trainable_ids)
        assert frozen_ids | trainable_ids == {id(p) for p in model.parameters()}


class TestGradientFlow:
    def test_single_step_touches_every_trainable_group(self, cond_inputs):
        """One combined-loss optimizer step must move at least one parameter
        in every trainable group and none in the frozen group."""
        img, tokens, feats = cond_inputs
        m = RestorationModel(seed=17)
        m.apply_freezing_policy()
        before = {
            name: [p.detach().clone() for p in params]
            for name, params in m.parameter_groups().items()
        }

        opt = torch.optim.Adam(m.trainable_parameters(), lr=1e-2)
        z0, enc_feats = m.encode_latent(img)
        rgb = [m.to_rgb(f, n) for n, f in enumerate(enc_feats.as_list(), start=1)]
        l_a = losses.domain_alignment_loss(rgb, img)

        cond = make_cond(m, img, tokens, feats)
        gen = torch.Generator().manual_seed(0)
        eps = torch.randn(z0.shape, generator=gen)
        z_t = forward_noising(z0.detach(), 300, eps, m.schedule)
        eps_hat = m.predict_noise(z_t, 300, cond)
        l_d = losses.diffusion_loss(eps, eps_hat)

        losses.total_loss(l_a, l_d).tensor.backward()
        opt.step()

        after = m.parameter_groups()
        for name in before:
            moved = any(
                not torch.equal(b, a)
                for b, a in zip(before[name], after[name])
            )
            if name == "frozen":
                assert not moved, "frozen parameters changed"
            else:
                assert moved, f"no parameter moved in group {name!r}"


class TestCheckpoint:
    def test_roundtrip_parameters_and_forward(self, tmp_path, cond_inputs):
        img, tokens, feats = cond_inputs
        m = RestorationModel(seed=23)
        with torch.no_grad():
            for p in m.parameters():
                p.add_(0.01 * torch.randn_like(p))
        path = tmp_path / "model.ckpt"
        checkpoint.save_checkpoint(m, path, extra={"step": 42})
        loaded, meta = checkpoint.load_checkpoint(path)
        for (na, pa), (nb, pb) in zip(
            m.named_parameters(), loaded.named_parameters()
        ):
            assert na == nb
            assert torch.equal(pa, pb), na
        assert meta["extra"]["step"] == 42
        cond = make_cond(m, img, tokens, feats)
        cond_l = make_cond(loaded, img, tokens, feats)
        z = torch.randn(1, C_LAT, 8, 8)
        with torch.no_grad():
            assert torch.equal(
                m.predict_noise(z, 9, cond), loaded.predict_noise(z, 9, cond_l)
            )

    def test_meta_contents(self, tmp_path, model):
        path = tmp_path / "m.ckpt"
        checkpoint.save_checkpoint(model, path)
        meta = checkpoint.read_meta(path)
        assert meta["version"] == checkpoint.CHECKPOINT_VERSION
        assert meta["model"] == {"c_lat": C_LAT, "sem_channels": 32, "emb_dim": 128}
        assert meta["groups"]["frozen"]["frozen"] is True
        for name in ("embeddings", "fidelity", "image_encoder", "local_modulator", "attention"):
            assert meta["groups"][name]["frozen"] is False
        named = dict(model.named_parameters())
        assert set(meta["shapes"]) == set(named)
        assert set(meta["param_groups"]) == set(named)
        for name, shape in meta["shapes"].items():
            assert tuple(shape) == tuple(named[name].shape)

    def test_loaded_model_is_frozen_per_policy(self, tmp_path, model):
        path = tmp_path / "m.ckpt"
        checkpoint.save_checkpoint(model, path)
        loaded, _ = checkpoint.load_checkpoint(path)
        for p in loaded.parameter_groups()["frozen"]:
            assert not p.requires_grad

    def _tamper(self, src, dst, mutate):
        with np.load(src) as archive:
            entries = {k: archive[k] for k in archive.files}
        mutate(entries)
        with open(dst, "wb") as fh:
            np.savez(fh, **entries)

    def test_shape_mismatch_rejected(self, tmp_path, model):
        src, dst = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint.save_checkpoint(model, src)
        name = "backbone.in_conv.bias"
        self._tamper(src, dst, lambda e: e.__setitem__(name, e[name][:-1]))
        with pytest.raises(StreamFormatError, match="shape"):
            checkpoint.load_checkpoint(dst)

    def test_missing_parameter_rejected(self, tmp_path, model):
        src, dst = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint.save_checkpoint(model, src)
        self._tamper(src, dst, lambda e: e.pop("backbone.out_conv.weight"))
        with pytest.raises(StreamFormatError, match="missing parameter"):
            checkpoint.load_checkpoint(dst)

    def test_bad_version_rejected(self, tmp_path, model):
        import json

        src, dst = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint.save_checkpoint(model, src)

        def bump(entries):
            meta = json.loads(bytes(entries[checkpoint.META_KEY]).decode())
            meta["version"] = 999
            entries[checkpoint.META_KEY] = np.frombuffer(
                json.dumps(meta).encode(), dtype=np.uint8
            )

        self._tamper(src, dst, bump)
        with pytest.raises(StreamFormatError, match="version"):
            checkpoint.load_checkpoint(dst)

    def test_missing_meta_rejected(self, tmp_path, model):
        src, dst = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint.save_checkpoint(model, src)
        self._tamper(src, dst, lambda e: e.pop(checkpoint.META_KEY))
        with pytest.raises(StreamFormatError, match="metadata"):
            checkpoint.read_meta(dst)
