"""Rate analysis and rate-distortion sweeps.

``rate_table`` measures how much anchor bitrate the downsampling step saves:
for each (qp, s) it reports the mean anchor-only bits per pixel against the
original dims and the reduction ratio relative to s=1. ``rd_sweep`` runs the
full compress/decompress path per configuration and scores the outputs with
the requested metrics, emitting one CSV row per (configuration, metric).
Both write plain CSV; the sweep can additionally render a static plot when
matplotlib is installed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import pipeline, toycodec
from .errors import StreamFormatError
from .metrics import RDPoint, psnr_for_csv
from .toycodec import AnchorCodec, CodecId


@dataclass(frozen=True)
class RateRow:
    """One rate-table row: a quality setting and its per-scale rates."""

    codec_id: CodecId
    native_qp: float
    bpp_orig: float
    bpp_by_s: dict[float, float]
    ratio_by_s: dict[float, float]


@dataclass(frozen=True)
class RateTable:
    scales: tuple[float, ...]
    rows: tuple[RateRow, ...]


def rate_table(
    images: list[np.ndarray],
    codec: AnchorCodec,
    qps: list[float],
    scales: list[float],
) -> RateTable:
    if not images or not qps or not scales:
        raise ValueError("images, qps, and scales must all be non-empty")
    if 1.0 not in [float(s) for s in scales]:
        scales = [1.0, *scales]
    scales = sorted(float(s) for s in scales)
    rows = []
    for qp in qps:
        bpp_by_s = {}
        for s in scales:
            params = pipeline.EncodingParams(
                codec.codec_id,
                toycodec.QualitySpec(float(qp), chi_qp=1.0),
                s=s,
                caption_enabled=False,
            )
            vals = [
                pipeline.anchor_bpp(pipeline.compress(img, params, {codec.codec_id: codec}))
                for img in images
            ]
            bpp_by_s[s] = float(np.mean(vals))
        bpp_orig = bpp_by_s[1.0]
        ratio_by_s = {s: bpp_orig / bpp for s, bpp in bpp_by_s.items()}
        rows.append(
            RateRow(
                codec_id=codec.codec_id,
                native_qp=float(qp),
                bpp_orig=bpp_orig,
                bpp_by_s=bpp_by_s,
                ratio_by_s=ratio_by_s,
            )
        )
    return RateTable(scales=tuple(scales), rows=tuple(rows))


def write_rate_csv(table: RateTable, path: str | Path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["codec", "native_qp", "s", "mean_bpp", "ratio"])
        for row in table.rows:
            for s in table.scales:
                writer.writerow(
                    [
                        row.codec_id.name.lower(),
                        row.native_qp,
                        s,
                        repr(row.bpp_by_s[s]),
                        repr(row.ratio_by_s[s]),
                    ]
                )


def rd_sweep(
    images: list[np.ndarray],
    codec: AnchorCodec,
    qps: list[float],
    scales: list[float],
    steps: int = 4,
    seed: int = 0,
    model=None,
    metric_specs: tuple[str, ...] = ("psnr",),
    crd_enabled: bool = True,
    calibration: list[np.ndarray] | None = None,
) -> list[RDPoint]:
    """Full compress/decompress per (qp, s); one aggregated point per
    (configuration, metric), with bpp = mean total container bits per pixel."""
    if not images or not qps or not scales:
        raise ValueError("images, qps, and scales must all be non-empty")
    resolved = [metrics_mod.resolve_metric(spec) for spec in metric_specs]
    codecs = {codec.codec_id: codec}
    if model is None and crd_enabled:
        from .decoder import RestorationModel

        model = RestorationModel()
    points = []
    for qp in qps:
        quality = toycodec.quality_for(
            codec, float(qp), calibration if calibration is not None else images
        )
        for s in scales:
            params = pipeline.EncodingParams(
                codec.codec_id,
                quality,
                s=float(s),
                crd_enabled=crd_enabled,
                caption_enabled=False,
            )
            bpps, scores = [], {name: [] for name, _ in resolved}
            for img in images:
                container = pipeline.compress(img, params, codecs)
                out = pipeline.decompress(
                    container, steps=steps, seed=seed, model=model, codecs=codecs
                )
                bpps.append(pipeline.total_bpp(container))
                for name, fn in resolved:
                    scores[name].append(fn(img, out))
            for name, _ in resolved:
                q = float(np.mean(scores[name]))
                if name == "psnr":
                    q = psnr_for_csv(q)
                points.append(
                    RDPoint(
                        bpp=float(np.mean(bpps)),
                        quality=q,
                        metric_name=name,
                        codec_name=codec.codec_id.name.lower(),
                        native_qp=float(qp),
                        s=float(s),
                    )
                )
    return points


def write_rd_csv(points: list[RDPoint], path: str | Path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["codec", "native_qp", "s", "bpp", "metric", "quality"])
        for p in points:
            writer.writerow(
                [p.codec_name, p.native_qp, p.s, repr(p.bpp), p.metric_name, repr(p.quality)]
            )


def read_rd_csv(path: str | Path) -> list[RDPoint]:
    points = []
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"bpp", "quality"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise StreamFormatError(
                f"R-D CSV must have columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for line, row in enumerate(reader, start=2):
            try:
                points.append(
                    RDPoint(
                        bpp=float(row["bpp"]),
                        quality=float(row["quality"]),
                        metric_name=row.get("metric", "psnr"),
                        codec_name=row.get("codec", "unknown"),
                        native_qp=float(row.get("native_qp", 0.0) or 0.0),
                        s=float(row.get("s", 1.0) or 1.0),
                    )
                )
            except ValueError as exc:
                raise StreamFormatError(f"bad R-D CSV row {line}: {exc}") from exc
    return points


def plot_rd(points: list[RDPoint], path: str | Path) -> None:
    """Static R-D plot, one line per (codec, metric, s). Needs matplotlib."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError(
            "plotting requires matplotlib (install the 'plot' extra)"
        ) from exc
    fig, ax = plt.subplots(figsize=(6, 4))
    groups: dict[tuple, list[RDPoint]] = {}
    for p in points:
        groups.setdefault((p.codec_name, p.metric_name, p.s), []).append(p)
    for (codec_name, metric_name, s), pts in sorted(groups.items()):
        pts = sorted(pts, key=lambda p: p.bpp)
        ax.plot(
            [p.bpp for p in pts],
            [p.quality for p in pts],
            marker="o",
            label=f"{codec_name} {metric_name} s={s:g}",
        )
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("quality")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
