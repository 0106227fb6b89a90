"""Degradation-aware conditioning blocks.

Everything that injects (codec type, codec quality, scale factor, timestep,
caption, soft semantics) into the frozen denoising backbone lives here:

- sinusoidal parameter encoding + two-layer MLP embeddings, one weight set
  per parameter kind and per consumer;
- the global adaptor block: a residual conv block whose hidden activation
  receives broadcast projections of the timestep embedding and the fused
  global encoding embedding;
- the local modulator: per-channel affine modulation (gain/bias from the
  parameter embeddings), codec-type first, then quality and scale branches
  in parallel, averaged;
- single-head semantic attention over flattened feature tokens, and caption
  cross-attention against hashed token embeddings.

Initialization contract: a freshly constructed conditioning stack is an
exact no-op on the backbone. That is achieved by zero-initializing only the
final projection of each injection path (the global-embedding projection,
the modulator's gain at one / bias at zero, attention value/output
projections). The embedding MLPs themselves start at random weights: if
both an MLP's output layer and its downstream projection started at zero,
the product structure would pin both gradients at zero and the path could
never learn its parameter sensitivity.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

EMBED_DIM = 128

#: multipliers applied before sinusoidal encoding; they spread the small
#: native ranges (quality proxies in ~[0.02, 0.15], scales in [1, 2]) across
#: the sinusoid frequency ladder. Timesteps already span [0, 1000).
PRE_SCALES = {"ct": 100.0, "qp": 1000.0, "s": 100.0, "t": 1.0}


def positional_encode(p: float | torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding: element 2k = sin(p / 10000^(2k/dim)), element
    2k+1 = cos of the same argument."""
    if dim % 2 != 0:
        raise ValueError(f"encoding dim must be even, got {dim}")
    if not torch.is_tensor(p):
        p = torch.tensor(float(p))
    p = p.to(torch.get_default_dtype()) if not p.dtype.is_floating_point else p
    freqs = torch.pow(
        torch.tensor(10000.0, dtype=p.dtype),
        torch.arange(0, dim, 2, dtype=p.dtype) / dim,
    )
    args = p[..., None] / freqs
    out = torch.empty(*p.shape, dim, dtype=p.dtype)
    out[..., 0::2] = torch.sin(args)
    out[..., 1::2] = torch.cos(args)
    return out


def _seeded_linear_init_(linear: nn.Linear, rng: np.random.Generator) -> None:
    # Mirrors the default nn.Linear bounds but draws from a numpy stream so
    # fixtures survive torch version changes.
    bound = 1.0 / math.sqrt(linear.in_features)
    w = rng.uniform(-bound, bound, size=linear.weight.shape)
    with torch.no_grad():
        linear.weight.copy_(torch.from_numpy(w).to(linear.weight.dtype))
        if linear.bias is not None:
            b = rng.uniform(-bound, bound, size=linear.bias.shape)
            linear.bias.copy_(torch.from_numpy(b).to(linear.bias.dtype))


def zero_linear_(linear: nn.Linear, bias_value: float = 0.0) -> nn.Linear:
    with torch.no_grad():
        linear.weight.zero_()
        if linear.bias is not None:
            linear.bias.fill_(bias_value)
    return linear


def zero_conv_(conv: nn.Conv2d) -> nn.Conv2d:
    with torch.no_grad():
        conv.weight.zero_()
        if conv.bias is not None:
            conv.bias.zero_()
    return conv


class ParamEmbeddingMLP(nn.Module):
    """Emb(p) = Linear2(SiLU(Linear1(PE(pre_scale * p))))."""

    def __init__(self, kind: str, dim: int = EMBED_DIM, seed: int | None = None):
        super().__init__()
        if kind not in PRE_SCALES:
            raise ValueError(f"unknown parameter kind {kind!r}")
        self.kind = kind
        self.dim = dim
        self.pre_scale = PRE_SCALES[kind]
        self.lin1 = nn.Linear(dim, dim)
        self.lin2 = nn.Linear(dim, dim)
        if seed is not None:
            rng = np.random.default_rng(seed)
            _seeded_linear_init_(self.lin1, rng)
            _seeded_linear_init_(self.lin2, rng)

    def forward(self, p: float | torch.Tensor) -> torch.Tensor:
        pe = positional_encode(
            p * self.pre_scale if torch.is_tensor(p) else float(p) * self.pre_scale,
            self.dim,
        ).to(self.lin1.weight.dtype)
        return self.lin2(F.silu(self.lin1(pe)))


class EmbeddingSet(nn.Module):
    """One embedding MLP per encoding parameter (codec type, quality,
    scale). Backbone and fidelity module each own one of these."""

    def __init__(self, dim: int = EMBED_DIM, seed: int | None = None):
        super().__init__()
        offs = {"ct": 0, "qp": 1, "s": 2}
        self.ct = ParamEmbeddingMLP("ct", dim, None if seed is None else seed + offs["ct"])
        self.qp = ParamEmbeddingMLP("qp", dim, None if seed is None else seed + offs["qp"])
        self.s = ParamEmbeddingMLP("s", dim, None if seed is None else seed + offs["s"])
        self.dim = dim

    def global_embedding(
        self,
        ct: float | torch.Tensor,
        qp: float | torch.Tensor,
        s: float | torch.Tensor,
    ) -> torch.Tensor:
        return fuse_global_embedding(self.ct(ct), self.qp(qp), self.s(s))


def fuse_global_embedding(
    ct: torch.Tensor, qp: torch.Tensor, s: torch.Tensor
) -> torch.Tensor:
    if not (ct.shape[-1] == qp.shape[-1] == s.shape[-1]):
        raise ValueError(
            f"embedding dims differ: {ct.shape[-1]}, {qp.shape[-1]}, {s.shape[-1]}"
        )
    return ct + qp + s


def _norm_groups(channels: int, target: int = 8) -> int:
    g = min(target, channels)
    while channels % g:
        g -= 1
    return g


def _bcast(vec: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
    """(D,) or (B, D) projection output -> (B, D, 1, 1) against feat."""
    if vec.dim() == 1:
        vec = vec[None].expand(feat.shape[0], -1)
    return vec[:, :, None, None]


class GlobalAdaptorBlock(nn.Module):
    """Residual conv block with timestep + global-encoding injection.

    h = conv1(act(norm1(x))); h += proj_t(t_emb) + proj_ge(ge); output is
    conv2(act(norm2(h))) + x. ``pre_norm_act=False`` drops the norm/SiLU
    pairs, leaving the bare composition conv2(conv1(x) + t + ge) + x used by
    the arithmetic unit tests.

    In the full model the convs, norms, and proj_t belong to the frozen
    pretrained backbone; proj_ge is the trainable injection and starts at
    exact zero so step 0 reproduces the prior.
    """

    def __init__(
        self,
        channels: int,
        emb_dim: int = EMBED_DIM,
        pre_norm_act: bool = True,
        seed: int | None = None,
    ):
        super().__init__()
        self.pre_norm_act = pre_norm_act
        if pre_norm_act:
            g = _norm_groups(channels)
            self.norm1 = nn.GroupNorm(g, channels)
            self.norm2 = nn.GroupNorm(g, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.proj_t = nn.Linear(emb_dim, channels)
        self.proj_ge = zero_linear_(nn.Linear(emb_dim, channels))
        if seed is not None:
            rng = np.random.default_rng(seed)
            for conv in (self.conv1, self.conv2):
                bound = 1.0 / math.sqrt(conv.in_channels * 9)
                with torch.no_grad():
                    conv.weight.copy_(
                        torch.from_numpy(
                            rng.uniform(-bound, bound, size=conv.weight.shape)
                        ).to(conv.weight.dtype)
                    )
                    conv.bias.copy_(
                        torch.from_numpy(
                            rng.uniform(-bound, bound, size=conv.bias.shape)
                        ).to(conv.bias.dtype)
                    )
            _seeded_linear_init_(self.proj_t, rng)

    def forward(
        self, f_u: torch.Tensor, t_emb: torch.Tensor, ge: torch.Tensor
    ) -> torch.Tensor:
        h = f_u
        if self.pre_norm_act:
            h = F.silu(self.norm1(h))
        h = self.conv1(h)
        h = h + _bcast(self.proj_t(t_emb), f_u) + _bcast(self.proj_ge(ge), f_u)
        if self.pre_norm_act:
            h = F.silu(self.norm2(h))
        h = self.conv2(h)
        return h + f_u


class EMod(nn.Module):
    """Per-channel affine modulation: alpha(emb) * F + beta(emb).

    Starts as an exact identity: gain projection at weight 0 / bias 1, bias
    projection fully zero.
    """

    def __init__(self, channels: int, emb_dim: int = EMBED_DIM):
        super().__init__()
        self.lin_alpha = zero_linear_(nn.Linear(emb_dim, channels), bias_value=1.0)
        self.lin_beta = zero_linear_(nn.Linear(emb_dim, channels))

    def forward(self, f: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        alpha = _bcast(self.lin_alpha(emb), f)
        beta = _bcast(self.lin_beta(emb), f)
        return alpha * f + beta


class LocalModulator(nn.Module):
    """Codec-type modulation first, then quality and scale branches in
    parallel, merged by averaging so identity branches compose to identity."""

    def __init__(self, channels: int, emb_dim: int = EMBED_DIM):
        super().__init__()
        self.mod_ct = EMod(channels, emb_dim)
        self.mod_qp = EMod(channels, emb_dim)
        self.mod_s = EMod(channels, emb_dim)

    def forward(
        self,
        f: torch.Tensor,
        ct_emb: torch.Tensor,
        qp_emb: torch.Tensor,
        s_emb: torch.Tensor,
    ) -> torch.Tensor:
        f_ct = self.mod_ct(f, ct_emb)
        return 0.5 * (self.mod_qp(f_ct, qp_emb) + self.mod_s(f_ct, s_emb))


def _to_tokens(f: torch.Tensor) -> torch.Tensor:
    b, c, h, w = f.shape
    return f.reshape(b, c, h * w).transpose(1, 2)


def _from_tokens(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, hw, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, h, w)


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    d_k = q.shape[-1]
    if d_k == 0:
        raise ValueError("attention key dim must be > 0")
    scores = q @ k.transpose(1, 2) / math.sqrt(d_k)
    return torch.softmax(scores, dim=-1) @ v


class SemanticAttention(nn.Module):
    """Single-head attention from feature tokens to soft-semantic tokens,
    added residually. Value projection starts at zero, making the block a
    no-op on a fresh model."""

    def __init__(
        self,
        channels: int,
        sem_channels: int,
        d_k: int | None = None,
        seed: int | None = None,
    ):
        super().__init__()
        d_k = d_k or channels
        self.w_q = nn.Linear(channels, d_k, bias=False)
        self.w_k = nn.Linear(sem_channels, d_k, bias=False)
        self.w_v = zero_linear_(nn.Linear(sem_channels, channels, bias=False))
        if seed is not None:
            rng = np.random.default_rng(seed)
            _seeded_linear_init_(self.w_q, rng)
            _seeded_linear_init_(self.w_k, rng)

    def forward(self, f_u: torch.Tensor, f_sem: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f_u.shape
        q = self.w_q(_to_tokens(f_u))
        sem_tokens = _to_tokens(f_sem)
        out = _attend(q, self.w_k(sem_tokens), self.w_v(sem_tokens))
        return f_u + _from_tokens(out, h, w)


class CaptionCrossAttention(nn.Module):
    """Single-head cross-attention from feature tokens to caption token
    embeddings; output projection starts at zero (no-op on a fresh model)."""

    def __init__(
        self,
        channels: int,
        token_dim: int = EMBED_DIM,
        d_k: int | None = None,
        seed: int | None = None,
    ):
        super().__init__()
        d_k = d_k or channels
        self.w_q = nn.Linear(channels, d_k, bias=False)
        self.w_k = nn.Linear(token_dim, d_k, bias=False)
        self.w_v = nn.Linear(token_dim, channels, bias=False)
        self.w_o = zero_linear_(nn.Linear(channels, channels, bias=False))
        if seed is not None:
            rng = np.random.default_rng(seed)
            for lin in (self.w_q, self.w_k, self.w_v):
                _seeded_linear_init_(lin, rng)

    def forward(self, f: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f.shape
        if tokens.dim() == 2:
            tokens = tokens[None].expand(b, -1, -1)
        q = self.w_q(_to_tokens(f))
        out = _attend(q, self.w_k(tokens), self.w_v(tokens))
        return f + _from_tokens(self.w_o(out), h, w)
