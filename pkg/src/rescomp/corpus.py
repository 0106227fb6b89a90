"""Seeded synthetic image corpus.

Smooth piecewise structure (oriented gradients, soft blobs, low-frequency
sinusoids, mild noise) standing in for natural photographs wherever the
package needs deterministic pixels: quality calibration, training demos, and
self tests. Every image is a pure function of (seed, height, width).
"""

from __future__ import annotations

import numpy as np

CALIBRATION_SEEDS = tuple(range(1000, 1008))
CALIBRATION_SIZE = 64


def synthetic_image(seed: int, height: int, width: int) -> np.ndarray:
    if height < 1 or width < 1:
        raise ValueError("image dims must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    img = np.empty((height, width, 3))
    for c in range(3):
        gx, gy = rng.uniform(-1.0, 1.0, size=2)
        chan = 0.5 + 0.25 * (gx * (xx - 0.5) + gy * (yy - 0.5))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.02, 0.10)
            chan = chan + amp * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        img[:, :, c] = chan
    for _ in range(4):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        sigma = rng.uniform(0.08, 0.30)
        blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2)))
        tint = rng.uniform(-0.3, 0.3, size=3)
        img = img + blob[:, :, None] * tint[None, None, :]
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_corpus(n: int, height: int, width: int, base_seed: int = 0) -> list[np.ndarray]:
    return [synthetic_image(base_seed + k, height, width) for k in range(n)]


def calibration_images() -> list[np.ndarray]:
    """The fixed 8-image set behind codec quality normalization."""
    return [
        synthetic_image(seed, CALIBRATION_SIZE, CALIBRATION_SIZE)
        for seed in CALIBRATION_SEEDS
    ]
