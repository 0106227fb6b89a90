"""Quality metrics, BD-rate, and the external metric plugin interface.

MS-SSIM follows the standard 5-scale construction (11x11 Gaussian window,
sigma 1.5, K1 = 0.01, K2 = 0.03, scale weights 0.0448/0.2856/0.3001/0.2363/
0.1333): per channel, valid-padding window statistics, contrast-structure
terms clamped at zero before exponentiation, images halved between scales by
2x2 mean pooling after symmetric padding to even dims. Images whose short
side cannot support 5 scales (< 176 px) use fewer scales with the leading
weights renormalized.

BD-rate is the classic Bjontegaard delta: cubic polynomial fit of
log10(rate) against quality per curve, integrated over the overlapping
quality range; result is (10**avg_delta - 1) * 100 percent.
"""

from __future__ import annotations

import math
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.signal import convolve2d

#: CSV files report identical-image PSNR as this cap instead of infinity.
PSNR_CSV_CAP = 99.0

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW = 11
_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) images, got {a.shape}")
    return a, b


def compute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over unit range; +inf when equal."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def psnr_for_csv(value: float) -> float:
    return min(value, PSNR_CSV_CAP)


def _gaussian_window() -> np.ndarray:
    g = np.exp(-0.5 * ((np.arange(_WINDOW) - (_WINDOW - 1) / 2) / _SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


_KERN = _gaussian_window()


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean luminance*cs and mean cs over the valid window positions."""
    mu_x = convolve2d(x, _KERN, mode="valid")
    mu_y = convolve2d(y, _KERN, mode="valid")
    sxx = convolve2d(x * x, _KERN, mode="valid") - mu_x * mu_x
    syy = convolve2d(y * y, _KERN, mode="valid") - mu_y * mu_y
    sxy = convolve2d(x * y, _KERN, mode="valid") - mu_x * mu_y
    lum = (2 * mu_x * mu_y + _C1) / (mu_x * mu_x + mu_y * mu_y + _C1)
    cs = (2 * sxy + _C2) / (sxx + syy + _C2)
    return float((lum * cs).mean()), float(cs.mean())


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    if h % 2:
        x = np.concatenate([x, x[-1:]], axis=0)
    if w % 2:
        x = np.concatenate([x, x[:, -1:]], axis=1)
    return x.reshape(x.shape[0] // 2, 2, x.shape[1] // 2, 2).mean(axis=(1, 3))


def _num_scales(h: int, w: int) -> int:
    d = min(h, w)
    k = 0
    while k < len(MSSSIM_WEIGHTS) and d >= _WINDOW:
        k += 1
        d = (d + 1) // 2
    return k


def compute_msssim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    h, w = a.shape[:2]
    k = _num_scales(h, w)
    if k == 0:
        raise ValueError(f"image {h}x{w} too small for an {_WINDOW}px window")
    weights = np.array(MSSSIM_WEIGHTS[:k])
    weights = weights / weights.sum()
    per_channel = []
    for c in range(3):
        x, y = a[:, :, c], b[:, :, c]
        value = 1.0
        for level in range(k):
            ssim_mean, cs_mean = _ssim_terms(x, y)
            term = ssim_mean if level == k - 1 else cs_mean
            value *= max(term, 0.0) ** weights[level]
            if level < k - 1:
                x, y = _halve(x), _halve(y)
        per_channel.append(value)
    return float(np.mean(per_channel))


# ---------------------------------------------------------------------------
# rate-distortion bookkeeping


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    metric_name: str = "psnr"
    codec_name: str = "toy-dct"
    native_qp: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if not (self.bpp > 0):
            raise ValueError(f"bpp must be > 0, got {self.bpp}")


def _as_rate_quality(curve: Sequence) -> tuple[np.ndarray, np.ndarray]:
    rates = []
    quals = []
    for p in curve:
        if isinstance(p, RDPoint):
            rates.append(p.bpp)
            quals.append(p.quality)
        else:
            r, q = p
            rates.append(float(r))
            quals.append(float(q))
    r = np.asarray(rates, dtype=np.float64)
    q = np.asarray(quals, dtype=np.float64)
    order = np.argsort(q)
    return r[order], q[order]


def bd_rate(anchor: Sequence, test: Sequence) -> float:
    """Average rate difference (%) of ``test`` against ``anchor`` at equal
    quality; negative means the test curve needs fewer bits."""
    r_a, q_a = _as_rate_quality(anchor)
    r_t, q_t = _as_rate_quality(test)
    for name, r, q in (("anchor", r_a, q_a), ("test", r_t, q_t)):
        if len(q) < 4:
            raise ValueError(f"{name} curve needs >= 4 points, got {len(q)}")
        if not (r > 0).all():
            raise ValueError(f"{name} curve has non-positive rates")
    lo = max(q_a.min(), q_t.min())
    hi = min(q_a.max(), q_t.max())
    if not hi > lo:
        raise ValueError(f"quality ranges do not overlap: [{lo}, {hi}]")
    p_a = np.polyfit(q_a, np.log10(r_a), 3)
    p_t = np.polyfit(q_t, np.log10(r_t), 3)
    int_a = np.polyint(p_a)
    int_t = np.polyint(p_t)
    area_a = np.polyval(int_a, hi) - np.polyval(int_a, lo)
    area_t = np.polyval(int_t, hi) - np.polyval(int_t, lo)
    avg_delta = (area_t - area_a) / (hi - lo)
    return (10.0**avg_delta - 1.0) * 100.0


# ---------------------------------------------------------------------------
# metric plugins

PairMetric = Callable[[np.ndarray, np.ndarray], float]

BUILTIN_METRICS: dict[str, PairMetric] = {
    "psnr": compute_psnr,
    "msssim": compute_msssim,
}


class PairMetricPlugin:
    """External per-pair metric: ``[*cmd, ref.png, test.png]`` printing one
    scalar on stdout."""

    def __init__(self, name: str, cmd: Sequence[str]):
        self.name = name
        self.cmd = list(cmd)

    def __call__(self, ref: np.ndarray, test: np.ndarray) -> float:
        from . import imageio

        with tempfile.TemporaryDirectory() as tmp:
            ref_path = Path(tmp) / "ref.png"
            test_path = Path(tmp) / "test.png"
            imageio.save_image(ref, ref_path)
            imageio.save_image(test, test_path)
            proc = subprocess.run(
                [*self.cmd, str(ref_path), str(test_path)],
                check=True,
                capture_output=True,
            )
        return float(proc.stdout.decode("utf-8").strip().split()[-1])


class SetMetricPlugin:
    """External set-level metric (FID style): ``[*cmd, ref_dir, test_dir]``
    over two directories of PNGs, printing one scalar."""

    def __init__(self, name: str, cmd: Sequence[str]):
        self.name = name
        self.cmd = list(cmd)

    def __call__(
        self, refs: Sequence[np.ndarray], tests: Sequence[np.ndarray]
    ) -> float:
        from . import imageio

        with tempfile.TemporaryDirectory() as tmp:
            ref_dir = Path(tmp) / "ref"
            test_dir = Path(tmp) / "test"
            ref_dir.mkdir()
            test_dir.mkdir()
            for i, img in enumerate(refs):
                imageio.save_image(img, ref_dir / f"{i:05d}.png")
            for i, img in enumerate(tests):
                imageio.save_image(img, test_dir / f"{i:05d}.png")
            proc = subprocess.run(
                [*self.cmd, str(ref_dir), str(test_dir)],
                check=True,
                capture_output=True,
            )
        return float(proc.stdout.decode("utf-8").strip().split()[-1])


def resolve_metric(spec: str) -> tuple[str, PairMetric]:
    """Metric lookup for CLI flags: a builtin name, or ``name=cmd arg ...``
    declaring an external pair plugin."""
    if "=" in spec:
        name, _, cmd = spec.partition("=")
        return name, PairMetricPlugin(name, cmd.split())
    if spec not in BUILTIN_METRICS:
        raise ValueError(
            f"unknown metric {spec!r}; builtins: {sorted(BUILTIN_METRICS)}"
        )
    return spec, BUILTIN_METRICS[spec]
