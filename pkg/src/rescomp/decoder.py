"""Latent-diffusion restoration decoder at desk scale.

A small latent autoencoder (3 stride-2 stages, latent at 1/8 scale with 4
channels) plus a 3-level U-Net denoiser (widths 32/64/128) stand in for a
large pretrained diffusion prior. The conditioning topology is the point:

- every residual block is a global adaptor block receiving the timestep
  embedding and the fused global encoding embedding;
- soft-semantic attention at the two deepest levels, caption cross-attention
  at the deepest;
- a fidelity branch (trainable copy of the U-Net encoder path, own
  embedding set) consumes the latent of the upsampled anchor-decoded image
  added to z_t and emits one zero-initialized-projection feature map per
  resolution, which - after per-level local modulation - is added onto the
  first backbone layer of the matching resolution.

Freshly constructed conditioning is an exact no-op: all injection paths end
in zero-initialized projections, so the model reproduces the bare backbone
until trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import (
    EMBED_DIM,
    CaptionCrossAttention,
    EmbeddingSet,
    GlobalAdaptorBlock,
    LocalModulator,
    ParamEmbeddingMLP,
    SemanticAttention,
    _seeded_linear_init_,
    zero_conv_,
)

C_LAT = 4
WIDTHS = (32, 64, 128)
LATENT_STAGES = 3  # stride-2 stages; latent lives at 1/8 image scale


def np_to_batch(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float image -> (1, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()


def batch_to_np(x: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) tensor -> (H, W, 3) float32 image."""
    return x[0].detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


def latent_dims(height: int, width: int) -> tuple[int, int]:
    h, w = height, width
    for _ in range(LATENT_STAGES):
        h = (h + 1) // 2
        w = (w + 1) // 2
    return h, w


def _seed_conv_(conv: nn.Conv2d | nn.ConvTranspose2d, rng: np.random.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        conv.weight.copy_(
            torch.from_numpy(rng.uniform(-bound, bound, size=conv.weight.shape)).float()
        )
        if conv.bias is not None:
            conv.bias.copy_(
                torch.from_numpy(rng.uniform(-bound, bound, size=conv.bias.shape)).float()
            )


@dataclass
class EncoderFeatures:
    """Multi-scale intermediates at 1/2, 1/4, 1/8 of the input dims."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor

    def as_list(self) -> list[torch.Tensor]:
        return [self.f1, self.f2, self.f3]


class ImageEncoder(nn.Module):
    """Three stride-2 conv stages (32 -> 64 -> 128) plus a latent head."""

    def __init__(self, c_lat: int = C_LAT, seed: int | None = None):
        super().__init__()
        self.stage1 = nn.Conv2d(3, WIDTHS[0], 3, stride=2, padding=1)
        self.stage2 = nn.Conv2d(WIDTHS[0], WIDTHS[1], 3, stride=2, padding=1)
        self.stage3 = nn.Conv2d(WIDTHS[1], WIDTHS[2], 3, stride=2, padding=1)
        self.head = nn.Conv2d(WIDTHS[2], c_lat, 3, padding=1)
        if seed is not None:
            rng = np.random.default_rng(seed)
            for conv in (self.stage1, self.stage2, self.stage3, self.head):
                _seed_conv_(conv, rng)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, EncoderFeatures]:
        if x.shape[-2] < 8 or x.shape[-1] < 8:
            raise ValueError(f"image dims must be >= 8, got {tuple(x.shape[-2:])}")
        f1 = F.silu(self.stage1(x))
        f2 = F.silu(self.stage2(f1))
        f3 = F.silu(self.stage3(f2))
        return self.head(f3), EncoderFeatures(f1, f2, f3)


class ImageDecoder(nn.Module):
    """Three stride-2 transposed-conv stages back to 3 channels."""

    def __init__(self, c_lat: int = C_LAT, seed: int | None = None):
        super().__init__()
        self.up1 = nn.ConvTranspose2d(c_lat, WIDTHS[2], 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(WIDTHS[2], WIDTHS[1], 4, stride=2, padding=1)
        self.up3 = nn.ConvTranspose2d(WIDTHS[1], 3, 4, stride=2, padding=1)
        if seed is not None:
            rng = np.random.default_rng(seed)
            for conv in (self.up1, self.up2, self.up3):
                _seed_conv_(conv, rng)

    def forward(
        self,
        z: torch.Tensor,
        out_hw: tuple[int, int] | None = None,
        clamp: bool = True,
    ) -> torch.Tensor:
        # clamp=False exposes the raw affine output for training losses; a
        # fresh decoder emits values outside [0, 1] everywhere, and a hard
        # clamp there would zero every reconstruction gradient
        x = F.silu(self.up1(z))
        x = F.silu(self.up2(x))
        x = self.up3(x)
        if out_hw is not None:
            oh, ow = out_hw
            if oh > x.shape[-2] or ow > x.shape[-1]:
                raise ValueError(
                    f"requested dims {out_hw} exceed decoded dims {tuple(x.shape[-2:])}"
                )
            x = x[..., :oh, :ow]
        return x.clamp(0.0, 1.0) if clamp else x


class ToRGBHeads(nn.Module):
    """One 1x1 conv per encoder level, mapping features to an RGB image at
    that level's resolution (left unclamped for the loss)."""

    def __init__(self, seed: int | None = None):
        super().__init__()
        self.heads = nn.ModuleList(nn.Conv2d(c, 3, 1) for c in WIDTHS)
        if seed is not None:
            rng = np.random.default_rng(seed)
            for conv in self.heads:
                _seed_conv_(conv, rng)

    def forward(self, f: torch.Tensor, level: int) -> torch.Tensor:
        if level not in (1, 2, 3):
            raise ValueError(f"level must be 1, 2, or 3, got {level}")
        return self.heads[level - 1](f)


# ---------------------------------------------------------------------------
# diffusion schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def __post_init__(self):
        b = self.betas
        if not ((b > 0).all() and (b < 1).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if not (np.diff(b) > 0).all():
            raise ValueError("betas must be strictly increasing")
        if not (np.diff(self.alphas_cumprod) < 0).all():
            raise ValueError("cumulative alphas must be strictly decreasing")

    @classmethod
    def linear(
        cls, t: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
    ) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, t, dtype=np.float64)
        return cls(betas=betas, alphas_cumprod=np.cumprod(1.0 - betas))


def forward_noising(
    z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < sched.T:
        raise ValueError(f"t must be in [0, {sched.T}), got {t}")
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 {tuple(z0.shape)}")
    abar = float(sched.alphas_cumprod[t])
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def sampling_timesteps(t_total: int, steps: int) -> list[int]:
    if not 1 <= steps <= t_total:
        raise ValueError(f"steps must be in [1, {t_total}], got {steps}")
    grid = np.linspace(t_total - 1, 0, steps)
    return [int(round(x)) for x in grid]


# ---------------------------------------------------------------------------
# conditioning bundle


@dataclass
class ConditioningBundle:
    """Everything predict_noise needs beyond (z_t, t).

    Static parts are built once per decompress; ``fidelity_features`` is
    refreshed every sampling step because the fidelity branch sees z_t.
    """

    ct: float
    qp: float
    s: float
    ct_emb: torch.Tensor
    qp_emb: torch.Tensor
    s_emb: torch.Tensor
    ge: torch.Tensor
    caption_tokens: torch.Tensor
    semantic_features: torch.Tensor
    x_g_up_latent: torch.Tensor | None = None
    fidelity_features: list[torch.Tensor] | None = field(default=None)


# ---------------------------------------------------------------------------
# denoiser backbone


class DenoiserBackbone(nn.Module):
    """3-level U-Net over the latent with additive skips.

    Frozen-prior surface: in/out convs, down/up convs, the adaptor blocks'
    convs/norms/proj_t, and the timestep MLP. The trainable conditioning
    hooks are each block's proj_ge plus the attention modules.
    """

    def __init__(
        self,
        c_lat: int = C_LAT,
        sem_channels: int = 32,
        emb_dim: int = EMBED_DIM,
        seed: int | None = None,
    ):
        super().__init__()
        w1, w2, w3 = WIDTHS
        sd = (lambda k: None) if seed is None else (lambda k: seed + k)
        self.t_mlp = ParamEmbeddingMLP("t", emb_dim, seed=sd(0))
        self.in_conv = nn.Conv2d(c_lat, w1, 3, padding=1)
        self.block1 = GlobalAdaptorBlock(w1, emb_dim, seed=sd(1))
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.block2 = GlobalAdaptorBlock(w2, emb_dim, seed=sd(2))
        self.sem2 = SemanticAttention(w2, sem_channels, seed=sd(3))
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.block3 = GlobalAdaptorBlock(w3, emb_dim, seed=sd(4))
        self.sem3 = SemanticAttention(w3, sem_channels, seed=sd(5))
        self.caption_attn = CaptionCrossAttention(w3, emb_dim, seed=sd(6))
        self.up2 = nn.Conv2d(w3, w2, 3, padding=1)
        self.block_up2 = GlobalAdaptorBlock(w2, emb_dim, seed=sd(7))
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.block_up1 = GlobalAdaptorBlock(w1, emb_dim, seed=sd(8))
        self.out_conv = nn.Conv2d(w1, c_lat, 3, padding=1)
        if seed is not None:
            rng = np.random.default_rng(seed + 100)
            for conv in (self.in_conv, self.down1, self.down2, self.up2, self.up1, self.out_conv):
                _seed_conv_(conv, rng)

    def forward(
        self,
        z_t: torch.Tensor,
        t_emb: torch.Tensor,
        ge: torch.Tensor,
        f_sem: torch.Tensor | None = None,
        caption_tokens: torch.Tensor | None = None,
        fidelity: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        x = self.in_conv(z_t)
        if fidelity is not None:
            x = x + fidelity[0]
        x = self.block1(x, t_emb, ge)
        skip1 = x
        x = self.down1(x)
        if fidelity is not None:
            x = x + fidelity[1]
        x = self.block2(x, t_emb, ge)
        if f_sem is not None:
            x = self.sem2(x, f_sem)
        skip2 = x
        x = self.down2(x)
        if fidelity is not None:
            x = x + fidelity[2]
        x = self.block3(x, t_emb, ge)
        if f_sem is not None:
            x = self.sem3(x, f_sem)
        if caption_tokens is not None:
            x = self.caption_attn(x, caption_tokens)
        x = self.up2(F.interpolate(x, size=skip2.shape[-2:], mode="nearest"))
        x = x + skip2
        x = self.block_up2(x, t_emb, ge)
        x = self.up1(F.interpolate(x, size=skip1.shape[-2:], mode="nearest"))
        x = x + skip1
        x = self.block_up1(x, t_emb, ge)
        return self.out_conv(x)

    def frozen_prior_parameters(self):
        """Everything belonging to the pretrained prior (left untouched by
        conditioning training)."""
        mods = [self.t_mlp, self.in_conv, self.down1, self.down2, self.up2, self.up1, self.out_conv]
        for m in mods:
            yield from m.parameters()
        for block in (self.block1, self.block2, self.block3, self.block_up2, self.block_up1):
            for name, p in block.named_parameters():
                if not name.startswith("proj_ge"):
                    yield p

    def ge_projection_parameters(self):
        for block in (self.block1, self.block2, self.block3, self.block_up2, self.block_up1):
            yield from block.proj_ge.parameters()

    def attention_parameters(self):
        for m in (self.sem2, self.sem3, self.caption_attn):
            yield from m.parameters()


class FidelityModule(nn.Module):
    """Trainable copy of the backbone encoder path with its own embedding
    set, fed by latent(x_g_up) + z_t; per-level outputs pass through
    zero-initialized 1x1 convs so a fresh branch contributes nothing."""

    def __init__(
        self, c_lat: int = C_LAT, emb_dim: int = EMBED_DIM, seed: int | None = None
    ):
        super().__init__()
        w1, w2, w3 = WIDTHS
        sd = (lambda k: None) if seed is None else (lambda k: seed + k)
        self.embeddings = EmbeddingSet(emb_dim, seed=sd(0))
        self.t_mlp = ParamEmbeddingMLP("t", emb_dim, seed=sd(3))
        self.in_conv = nn.Conv2d(c_lat, w1, 3, padding=1)
        self.block1 = GlobalAdaptorBlock(w1, emb_dim, seed=sd(4))
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.block2 = GlobalAdaptorBlock(w2, emb_dim, seed=sd(5))
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.block3 = GlobalAdaptorBlock(w3, emb_dim, seed=sd(6))
        self.out1 = zero_conv_(nn.Conv2d(w1, w1, 1))
        self.out2 = zero_conv_(nn.Conv2d(w2, w2, 1))
        self.out3 = zero_conv_(nn.Conv2d(w3, w3, 1))
        if seed is not None:
            rng = np.random.default_rng(seed + 200)
            for conv in (self.in_conv, self.down1, self.down2):
                _seed_conv_(conv, rng)

    def clone_backbone_weights(self, backbone: DenoiserBackbone) -> None:
        """Start the branch from the pretrained prior's encoder path."""
        with torch.no_grad():
            self.in_conv.load_state_dict(backbone.in_conv.state_dict())
            self.down1.load_state_dict(backbone.down1.state_dict())
            self.down2.load_state_dict(backbone.down2.state_dict())
            for mine, theirs in (
                (self.block1, backbone.block1),
                (self.block2, backbone.block2),
                (self.block3, backbone.block3),
            ):
                mine.load_state_dict(theirs.state_dict())

    def forward(
        self,
        x_g_latent: torch.Tensor,
        z_t: torch.Tensor,
        t: int | torch.Tensor,
        ct: float | torch.Tensor,
        qp: float | torch.Tensor,
        s: float | torch.Tensor,
    ) -> list[torch.Tensor]:
        if x_g_latent.shape != z_t.shape:
            raise ValueError(
                f"guide latent {tuple(x_g_latent.shape)} != z_t {tuple(z_t.shape)}"
            )
        t_emb = self.t_mlp(t if torch.is_tensor(t) else float(t))
        ge = self.embeddings.global_embedding(ct, qp, s)
        x = self.in_conv(x_g_latent + z_t)
        x = self.block1(x, t_emb, ge)
        g1 = self.out1(x)
        x = self.down1(x)
        x = self.block2(x, t_emb, ge)
        g2 = self.out2(x)
        x = self.down2(x)
        x = self.block3(x, t_emb, ge)
        g3 = self.out3(x)
        return [g1, g2, g3]


class RestorationModel(nn.Module):
    """Full restoration decoder: autoencoder + conditioned denoiser +
    fidelity branch + per-level local modulators."""

    def __init__(
        self,
        c_lat: int = C_LAT,
        sem_channels: int = 32,
        emb_dim: int = EMBED_DIM,
        seed: int = 0,
    ):
        super().__init__()
        self.emb_dim = emb_dim
        self.image_encoder = ImageEncoder(c_lat, seed=seed + 11)
        self.latent_decoder = ImageDecoder(c_lat, seed=seed + 12)
        self.to_rgb = ToRGBHeads(seed=seed + 13)
        self.embeddings = EmbeddingSet(emb_dim, seed=seed + 14)
        self.backbone = DenoiserBackbone(c_lat, sem_channels, emb_dim, seed=seed + 20)
        self.fidelity = FidelityModule(c_lat, emb_dim, seed=seed + 40)
        self.modulators = nn.ModuleList(LocalModulator(c, emb_dim) for c in WIDTHS)
        self.schedule = NoiseSchedule.linear()

    # -- autoencoder surface

    def encode_latent(self, img: np.ndarray | torch.Tensor):
        x = np_to_batch(img) if isinstance(img, np.ndarray) else img
        return self.image_encoder(x)

    def decode_latent(
        self,
        z: torch.Tensor,
        out_hw: tuple[int, int] | None = None,
        clamp: bool = True,
    ) -> torch.Tensor:
        return self.latent_decoder(z, out_hw, clamp=clamp)

    # -- conditioning plumbing

    def make_conditioning(
        self,
        x_g_up: np.ndarray,
        ct: float,
        qp: float,
        s: float,
        caption_tokens: np.ndarray,
        semantic_features: np.ndarray,
    ) -> ConditioningBundle:
        with torch.no_grad():
            latent, _ = self.encode_latent(x_g_up)
        return ConditioningBundle(
            ct=float(ct),
            qp=float(qp),
            s=float(s),
            ct_emb=self.embeddings.ct(float(ct)),
            qp_emb=self.embeddings.qp(float(qp)),
            s_emb=self.embeddings.s(float(s)),
            ge=self.embeddings.global_embedding(float(ct), float(qp), float(s)),
            caption_tokens=torch.from_numpy(caption_tokens).float(),
            semantic_features=torch.from_numpy(semantic_features).float()[None],
            x_g_up_latent=latent,
        )

    def modulated_fidelity(
        self, z_t: torch.Tensor, t: int | torch.Tensor, cond: ConditioningBundle
    ) -> list[torch.Tensor]:
        if cond.x_g_up_latent is None:
            raise ValueError("conditioning bundle lacks the guide latent")
        feats = self.fidelity(cond.x_g_up_latent, z_t, t, cond.ct, cond.qp, cond.s)
        return [
            mod(f, cond.ct_emb, cond.qp_emb, cond.s_emb)
            for mod, f in zip(self.modulators, feats)
        ]

    def predict_noise(
        self,
        z_t: torch.Tensor,
        t: int | torch.Tensor,
        cond: ConditioningBundle | None = None,
    ) -> torch.Tensor:
        """Noise estimate; ``cond=None`` runs the bare (unconditional)
        backbone, which a freshly initialized conditioned model matches
        exactly."""
        t_emb = self.backbone.t_mlp(t if torch.is_tensor(t) else float(t))
        if cond is None:
            ge = torch.zeros(self.emb_dim, dtype=z_t.dtype)
            return self.backbone(z_t, t_emb, ge)
        if cond.fidelity_features is not None:
            fidelity = cond.fidelity_features
        elif cond.x_g_up_latent is not None:
            fidelity = self.modulated_fidelity(z_t, t, cond)
        else:
            raise ValueError(
                "conditioning bundle has neither fidelity features nor a guide latent"
            )
        return self.backbone(
            z_t,
            t_emb,
            cond.ge,
            f_sem=cond.semantic_features,
            caption_tokens=cond.caption_tokens,
            fidelity=fidelity,
        )

    @torch.no_grad()
    def sample(
        self,
        cond: ConditioningBundle,
        steps: int,
        seed: int,
        out_hw: tuple[int, int],
        latent_hw: tuple[int, int] | None = None,
    ) -> torch.Tensor:
        """Deterministic DDIM (eta = 0) from seeded Gaussian noise."""
        sched = self.schedule
        if latent_hw is None:
            latent_hw = latent_dims(*out_hw)
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(1, C_LAT, *latent_hw, generator=gen)
        ts = sampling_timesteps(sched.T, steps)
        x0 = z
        for i, t in enumerate(ts):
            eps = self.predict_noise(z, t, cond)
            abar = float(sched.alphas_cumprod[t])
            x0 = (z - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
            if i + 1 < len(ts):
                abar_next = float(sched.alphas_cumprod[ts[i + 1]])
                z = math.sqrt(abar_next) * x0 + math.sqrt(1.0 - abar_next) * eps
        return self.decode_latent(x0, out_hw)

    # -- parameter group surface

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named trainable groups plus the frozen remainder; disjoint and
        jointly exhaustive over model parameters."""
        groups = {
            "embeddings": [
                *self.embeddings.parameters(),
                *self.backbone.ge_projection_parameters(),
            ],
            "fidelity": list(self.fidelity.parameters()),
            "image_encoder": [
                *self.image_encoder.parameters(),
                *self.to_rgb.parameters(),
            ],
            "local_modulator": list(self.modulators.parameters()),
            "attention": list(self.backbone.attention_parameters()),
            "frozen": [
                *self.backbone.frozen_prior_parameters(),
                *self.latent_decoder.parameters(),
            ],
        }
        return groups

    def trainable_parameters(self):
        for name, params in self.parameter_groups().items():
            if name != "frozen":
                yield from params

    def apply_freezing_policy(self) -> None:
        """Freeze the pretrained prior surface; leave conditioning, fidelity,
        image encoder, modulators, and attention trainable."""
        for p in self.parameters():
            p.requires_grad_(True)
        for p in self.parameter_groups()["frozen"]:
            p.requires_grad_(False)
