"""Desk-scale training: pair construction, the conditioning train step, and
the two pretraining phases that stand in for a large pretrained prior.

Phases, in order:

1. ``pretrain_autoencoder`` - reconstruction MSE on clean crops; trains the
   image encoder and latent decoder so the latent space is meaningful.
2. ``pretrain_backbone`` - unconditional noise-prediction MSE on clean
   latents; trains the denoiser surface that is frozen afterwards.
3. ``train_conditioning`` - the main loop: random crops are degraded by
   downsample -> anchor codec -> upsample, and all conditioning paths
   (embedding MLPs + GE projections, fidelity branch, local modulators,
   attention projections, image encoder + RGB heads) are trained with the
   diffusion + domain-alignment objective while the prior stays frozen.

All randomness flows from one ``numpy`` generator per run and the loop
forces single-threaded torch, so a fixed seed reproduces the loss trace
exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import corpus, losses, rescale, semantics, toycodec
from .decoder import RestorationModel, forward_noising
from .errors import TrainingDiverged
from .pipeline import EncodingParams
from .toycodec import AnchorCodec, CodecId, QualitySpec


@dataclass
class TrainingConfig:
    steps: int
    crop_size: int = 64
    batch: int = 4
    lr: float = 5e-5
    s_range: tuple[float, float] = (1.0, 2.0)
    qp_pool: tuple[float, ...] = (24.0, 36.0, 48.0)
    codec_pool: tuple[CodecId, ...] = (CodecId.TOY_DCT,)
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    w_align: float = 1.0
    w_diff: float = 1.0
    caption_text: str = ""
    pretrain_ae_steps: int = 0
    pretrain_backbone_steps: int = 0
    pretrain_lr: float = 1e-3
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.crop_size < 8 or self.crop_size % 8 != 0:
            raise ValueError(
                f"crop_size must be a positive multiple of 8, got {self.crop_size}"
            )
        lo, hi = self.s_range
        if not (1.0 <= lo <= hi <= 2.0):
            raise ValueError(f"s_range must satisfy 1 <= lo <= hi <= 2, got {self.s_range}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not self.qp_pool:
            raise ValueError("qp_pool must be non-empty")
        if not self.codec_pool:
            raise ValueError("codec_pool must be non-empty")
        if self.lr < 0 or self.pretrain_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass
class TrainingPair:
    """One supervised example: the clean crop, its degraded-and-upsampled
    counterpart, and the encoding parameters that produced it."""

    crop: np.ndarray
    x_g_up: np.ndarray
    params: EncodingParams


def make_training_pair(
    img: np.ndarray,
    rng: np.random.Generator,
    config: TrainingConfig,
    codecs: dict[CodecId, AnchorCodec] | None = None,
    calibration: list[np.ndarray] | None = None,
) -> TrainingPair:
    codecs = codecs if codecs is not None else toycodec.default_codecs()
    h, w = img.shape[0], img.shape[1]
    cs = config.crop_size
    if h < cs or w < cs:
        raise ValueError(f"image {h}x{w} smaller than crop {cs}")
    top = int(rng.integers(0, h - cs + 1))
    left = int(rng.integers(0, w - cs + 1))
    crop = np.ascontiguousarray(img[top : top + cs, left : left + cs])
    s = float(rng.uniform(*config.s_range))
    qp = float(config.qp_pool[int(rng.integers(len(config.qp_pool)))])
    codec_id = config.codec_pool[int(rng.integers(len(config.codec_pool)))]
    codec = codecs[codec_id]
    chi_qp = toycodec.normalize_qp(
        codec, qp, calibration if calibration is not None else corpus.calibration_images()
    )
    params = EncodingParams(codec_id, QualitySpec(qp, chi_qp), s)
    lr_img = rescale.downsample(crop, params.s)
    x_g = codec.decode(codec.encode(lr_img, qp))
    if x_g.shape[:2] != (cs, cs):
        x_g = rescale.upsample(x_g, cs, cs)
    return TrainingPair(crop=crop, x_g_up=x_g, params=params)


def _check_finite(lv: losses.LossValue, where: str) -> losses.LossValue:
    if not math.isfinite(lv.value):
        raise TrainingDiverged(
            f"non-finite loss at {where}: {lv.value} (components {lv.components})"
        )
    return lv


def train_step(
    model: RestorationModel,
    pairs: list[TrainingPair],
    optimizer: torch.optim.Optimizer,
    config: TrainingConfig,
    rng: np.random.Generator,
    semantic_provider: semantics.SemanticProvider | None = None,
    step_index: int = 0,
) -> losses.LossValue:
    """One optimizer step over a batch of pairs. Per item: fresh timestep t,
    fresh Gaussian noise, full conditioning bundle; losses averaged over the
    batch."""
    provider = semantic_provider or semantics.FrozenConvSemanticProvider()
    tokens = semantics.caption_tokenize(config.caption_text)
    optimizer.zero_grad()
    total_tensor = None
    comp = {"alignment": 0.0, "diffusion": 0.0}
    for pair in pairs:
        z0, enc_feats = model.encode_latent(pair.crop)
        rgb = [model.to_rgb(f, n) for n, f in enumerate(enc_feats.as_list(), 1)]
        l_a = losses.domain_alignment_loss(rgb, pair.crop)
        t = int(rng.integers(0, model.schedule.T))
        eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).float()
        z_t = forward_noising(z0, t, eps, model.schedule)
        feats = provider(pair.x_g_up).array
        cond = model.make_conditioning(
            pair.x_g_up,
            pair.params.chi_ct,
            pair.params.quality.chi_qp,
            pair.params.s,
            tokens,
            feats,
        )
        eps_hat = model.predict_noise(z_t, t, cond)
        l_d = losses.diffusion_loss(eps, eps_hat)
        lv = losses.total_loss(l_a, l_d, config.w_align, config.w_diff)
        total_tensor = lv.tensor if total_tensor is None else total_tensor + lv.tensor
        for k in comp:
            comp[k] += lv.components[k]
    n = len(pairs)
    mean_tensor = total_tensor / n
    out = losses.LossValue(
        tensor=mean_tensor, components={k: v / n for k, v in comp.items()}
    )
    _check_finite(out, f"step {step_index}")
    mean_tensor.backward()
    optimizer.step()
    return out


# ---------------------------------------------------------------------------
# pretraining phases


def _crop_batch(
    images: list[np.ndarray], rng: np.random.Generator, crop: int, batch: int
) -> torch.Tensor:
    crops = []
    for _ in range(batch):
        img = images[int(rng.integers(len(images)))]
        top = int(rng.integers(0, img.shape[0] - crop + 1))
        left = int(rng.integers(0, img.shape[1] - crop + 1))
        crops.append(img[top : top + crop, left : left + crop])
    return torch.from_numpy(
        np.stack(crops).transpose(0, 3, 1, 2).astype(np.float32)
    )


def pretrain_autoencoder(
    model: RestorationModel,
    images: list[np.ndarray],
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    crop_size: int = 64,
    batch: int = 4,
) -> list[float]:
    """Reconstruction MSE on clean crops; trains encoder and latent decoder."""
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    params = [
        *model.image_encoder.parameters(),
        *model.latent_decoder.parameters(),
        *model.to_rgb.parameters(),
    ]
    opt = torch.optim.Adam(params, lr=lr)
    trace = []
    for step in range(steps):
        x = _crop_batch(images, rng, crop_size, batch)
        z, enc_feats = model.image_encoder(x)
        # loss on the unclamped output: the inference-path clamp saturates on
        # a fresh decoder and would zero the reconstruction gradient
        recon = model.latent_decoder(z, out_hw=x.shape[-2:], clamp=False)
        loss = torch.mean((recon - x) ** 2)
        rgb = [model.to_rgb(f, n) for n, f in enumerate(enc_feats.as_list(), 1)]
        gt = x.detach().numpy().transpose(0, 2, 3, 1)
        loss = loss + 0.1 * losses.domain_alignment_loss(rgb, gt).tensor
        if not math.isfinite(float(loss.detach())):
            raise TrainingDiverged(f"non-finite loss at autoencoder step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return trace


def pretrain_backbone(
    model: RestorationModel,
    images: list[np.ndarray],
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    crop_size: int = 64,
    batch: int = 4,
) -> list[float]:
    """Unconditional noise-prediction MSE; trains the denoiser surface that
    the conditioning phase then freezes."""
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(list(model.backbone.frozen_prior_parameters()), lr=lr)
    trace = []
    for step in range(steps):
        x = _crop_batch(images, rng, crop_size, batch)
        with torch.no_grad():
            z0, _ = model.image_encoder(x)
        t = int(rng.integers(0, model.schedule.T))
        eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).float()
        z_t = forward_noising(z0, t, eps, model.schedule)
        eps_hat = model.predict_noise(z_t, t, None)
        loss = torch.mean((eps - eps_hat) ** 2)
        if not math.isfinite(float(loss.detach())):
            raise TrainingDiverged(f"non-finite loss at backbone step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return trace


# ---------------------------------------------------------------------------
# main conditioning loop


def train_conditioning(
    model: RestorationModel,
    images: list[np.ndarray],
    config: TrainingConfig,
    codecs: dict[CodecId, AnchorCodec] | None = None,
    calibration: list[np.ndarray] | None = None,
    csv_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> list[dict]:
    """Train the conditioning paths with the prior frozen. Returns one row
    per step: {step, l_diff, l_a, l_total, lr}."""
    torch.set_num_threads(1)
    model.fidelity.clone_backbone_weights(model.backbone)
    model.apply_freezing_policy()
    opt = torch.optim.Adam(
        model.trainable_parameters(),
        lr=config.lr,
        betas=config.adam_betas,
        eps=config.adam_eps,
    )
    rng = np.random.default_rng(config.seed)
    provider = semantics.FrozenConvSemanticProvider()
    rows = []
    for step in range(config.steps):
        pairs = [
            make_training_pair(
                images[int(rng.integers(len(images)))], rng, config, codecs, calibration
            )
            for _ in range(config.batch)
        ]
        lv = train_step(
            model, pairs, opt, config, rng,
            semantic_provider=provider, step_index=step,
        )
        rows.append(
            {
                "step": step,
                "l_diff": lv.components["diffusion"],
                "l_a": lv.components["alignment"],
                "l_total": lv.value,
                "lr": config.lr,
            }
        )
        if (
            checkpoint_path is not None
            and config.checkpoint_every
            and (step + 1) % config.checkpoint_every == 0
        ):
            from . import checkpoint

            checkpoint.save_checkpoint(model, checkpoint_path, extra={"step": step})
    if csv_path is not None:
        write_loss_csv(rows, csv_path)
    if checkpoint_path is not None:
        from . import checkpoint

        checkpoint.save_checkpoint(
            model, checkpoint_path, extra={"step": config.steps - 1}
        )
    return rows


def write_loss_csv(rows: list[dict], path: str | Path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "l_diff", "l_a", "l_total", "lr"])
        writer.writeheader()
        writer.writerows(rows)
