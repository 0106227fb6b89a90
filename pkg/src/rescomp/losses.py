"""Training objectives.

Two terms: the noise-estimation MSE on the latent, and a multi-scale domain
alignment term that pulls the image encoder's intermediate features (read
out through the 1x1 RGB heads) toward bicubic-downsampled ground truth at
1/2, 1/4, and 1/8 scale. The alignment target is produced by the same
bicubic resampler used on the compression side. All reductions are means so
magnitudes stay resolution-independent; the total is a weighted sum with
both weights defaulting to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import rescale


@dataclass
class LossValue:
    """A scalar loss tensor (graph-connected for backward) plus its logged
    components; the tensor's value equals the sum of the components."""

    tensor: torch.Tensor
    components: dict[str, float]

    @property
    def value(self) -> float:
        return float(self.tensor.detach())


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> LossValue:
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    mse = torch.mean((eps - eps_hat) ** 2)
    return LossValue(tensor=mse, components={"diffusion": float(mse.detach())})


def _alignment_targets(gt: np.ndarray, rgb_outputs) -> list[torch.Tensor]:
    stack = gt[None] if gt.ndim == 3 else gt  # (B, H, W, 3)
    h, w = stack.shape[1:3]
    targets = []
    for n, out in enumerate(rgb_outputs, start=1):
        fh, fw = out.shape[-2:]
        want_h, want_w = h, w
        for _ in range(n):
            want_h = (want_h + 1) // 2
            want_w = (want_w + 1) // 2
        if (fh, fw) != (want_h, want_w):
            raise ValueError(
                f"level {n} output is {fh}x{fw}, expected {want_h}x{want_w} "
                f"for a {h}x{w} ground truth"
            )
        small = np.stack([rescale.resample(img, fh, fw) for img in stack])
        targets.append(
            torch.from_numpy(small.transpose(0, 3, 1, 2)).to(out.dtype)
        )
    return targets


def domain_alignment_loss(rgb_outputs, gt: np.ndarray) -> LossValue:
    """Sum over levels of mean absolute error between each RGB head output
    (B, 3, h_n, w_n) and the ground truth resampled to that level's dims."""
    if len(rgb_outputs) != 3:
        raise ValueError(f"expected 3 per-level outputs, got {len(rgb_outputs)}")
    total = None
    for out, target in zip(rgb_outputs, _alignment_targets(gt, rgb_outputs)):
        term = torch.mean(torch.abs(target.expand_as(out) - out))
        total = term if total is None else total + term
    return LossValue(tensor=total, components={"alignment": float(total.detach())})


def total_loss(
    l_a: LossValue, l_diff: LossValue, w_align: float = 1.0, w_diff: float = 1.0
) -> LossValue:
    tensor = w_align * l_a.tensor + w_diff * l_diff.tensor
    components = {
        "alignment": w_align * l_a.components["alignment"],
        "diffusion": w_diff * l_diff.components["diffusion"],
    }
    return LossValue(tensor=tensor, components=components)
