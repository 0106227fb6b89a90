"""Arbitrary-scale bicubic resampling.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1]. Both
directions use the same cubic convolution kernel (a = -0.5, Catmull-Rom
family), pixel-center coordinate mapping (align_corners=False), and
clamp-to-edge boundary handling. Downsampling does not low-pass first; the
kernel is evaluated at the fractional source coordinate only.
"""

from __future__ import annotations

import math

import numpy as np

KERNEL_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = KERNEL_A) -> np.ndarray:
    """Cubic convolution kernel W(x); support |x| < 2."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    out[near] = (a + 2.0) * x[near] ** 3 - (a + 3.0) * x[near] ** 2 + 1.0
    out[far] = a * x[far] ** 3 - 5.0 * a * x[far] ** 2 + 8.0 * a * x[far] - 4.0 * a
    return out


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scaled_dims(height: int, width: int, s: float) -> tuple[int, int]:
    """Output dims for downsampling by factor s: max(1, round_half_up(d / s))."""
    return max(1, round_half_up(height / s)), max(1, round_half_up(width / s))


def _axis_weights(in_size: int, out_size: int) -> np.ndarray:
    """Dense (out_size, in_size) resampling matrix for one axis.

    Source coordinate of output pixel i is (i + 0.5) * in/out - 0.5; the four
    taps around it are clamped to the valid range and their kernel weights are
    renormalized to unit sum so constant signals are preserved exactly.
    """
    ratio = in_size / out_size
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        src = (i + 0.5) * ratio - 0.5
        base = math.floor(src)
        frac = src - base
        taps = np.arange(base - 1, base + 3)
        w = cubic_kernel(frac - (taps - base))
        w /= w.sum()
        np.add.at(mat[i], np.clip(taps, 0, in_size - 1), w)
    return mat


def resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resample to (out_h, out_w), clamped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be >= 1, got {out_h}x{out_w}")
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("empty image")
    if (out_h, out_w) == (h, w):
        return img.astype(np.float32).copy()
    rows = _axis_weights(h, out_h)
    cols = _axis_weights(w, out_w)
    # two BLAS contractions; a single dense einsum over both axes is O(h*w*out_h*out_w)
    tmp = np.tensordot(rows, img.astype(np.float64), axes=(1, 0))
    out = np.moveaxis(np.tensordot(tmp, cols, axes=(1, 1)), 2, 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def downsample(img: np.ndarray, s: float) -> np.ndarray:
    """Downsample by continuous factor s >= 1. s = 1 returns an identical copy."""
    if not math.isfinite(s) or s < 1.0:
        raise ValueError(f"scale factor must be >= 1, got {s}")
    img = np.asarray(img)
    if img.size == 0:
        raise ValueError("empty image")
    out_h, out_w = scaled_dims(img.shape[0], img.shape[1], s)
    return resample(img, out_h, out_w)


def upsample(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resample to the given dims (pure resampler, either direction allowed)."""
    return resample(img, target_h, target_w)
