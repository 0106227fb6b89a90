"""Command-line surface.

Subcommands: compress, decompress, analyze-rate, rd-sweep, bd-rate, train,
selftest. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 internal error.

A config file (``--config``) holds one ``key=value`` pair per line, ``#``
comments allowed; keys mirror the long flag names with dashes or
underscores. Explicit command-line flags win over config-file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, corpus, imageio, metrics, pipeline, semantics, toycodec
from .errors import StreamFormatError, TrainingDiverged
from .toycodec import CodecId

CODEC_NAMES = {"toy-dct": CodecId.TOY_DCT}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exception instead of exiting
    with argparse's own status code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_model(checkpoint_path: str | None):
    from . import checkpoint as ckpt
    from .decoder import RestorationModel

    if checkpoint_path is None:
        return RestorationModel()
    model, _ = ckpt.load_checkpoint(checkpoint_path)
    return model


def _gather_images(spec: str) -> list[np.ndarray]:
    path = Path(spec)
    if path.is_file():
        return [imageio.load_image(path)]
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
        if not files:
            raise StreamFormatError(f"no images found in {path}")
        return [imageio.load_image(p) for p in files]
    raise FileNotFoundError(spec)


def _parse_codec(name: str) -> CodecId:
    if name not in CODEC_NAMES:
        raise UsageError(
            f"unknown codec {name!r}; available: {sorted(CODEC_NAMES)}"
        )
    return CODEC_NAMES[name]


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad numeric list {text!r}: {exc}") from None


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise StreamFormatError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_defaults(parser: argparse.ArgumentParser, args_list: list[str]):
    """Pre-scan for --config and fold its values in as parser defaults."""
    if "--config" not in args_list:
        return
    idx = args_list.index("--config")
    if idx + 1 >= len(args_list):
        raise UsageError("--config needs a file path")
    raw = read_config_file(args_list[idx + 1])
    known = {a.dest for a in parser._actions}
    defaults = {}
    for key, value in raw.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        for action in parser._actions:
            if action.dest == key:
                if action.type is not None:
                    value = action.type(value)
                elif isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                    value = value.lower() in ("1", "true", "yes", "on")
                defaults[key] = value
    parser.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# subcommands


def cmd_compress(args) -> int:
    img = imageio.load_image(args.input)
    codec_id = _parse_codec(args.codec)
    codec = toycodec.default_codecs()[codec_id]
    quality = toycodec.quality_for(codec, args.qp, corpus.calibration_images())
    params = pipeline.EncodingParams(
        codec_id,
        quality,
        s=args.scale,
        crd_enabled=not args.no_crd,
        caption_enabled=not args.no_caption,
    )
    provider = (
        semantics.FixedCaptionProvider(args.caption)
        if args.caption
        else semantics.EmptyCaptionProvider()
    )
    container = pipeline.compress(img, params, caption_provider=provider)
    blob = pipeline.serialize(container)
    Path(args.output).write_bytes(blob)
    h, w = img.shape[:2]
    print(
        f"{args.input} -> {args.output}: {len(blob)} bytes, "
        f"anchor {pipeline.anchor_bpp(container):.4f} bpp, "
        f"total {pipeline.total_bpp(container):.4f} bpp ({w}x{h}, s={params.s:g})"
    )
    return EXIT_OK


def cmd_decompress(args) -> int:
    container = pipeline.deserialize(Path(args.input).read_bytes())
    model = _load_model(args.checkpoint) if container.crd_enabled else None
    out = pipeline.decompress(container, steps=args.steps, seed=args.seed, model=model)
    imageio.save_image(out, args.output)
    mode = "restored" if container.crd_enabled else "anchor pass-through"
    print(
        f"{args.input} -> {args.output}: {container.orig_w}x{container.orig_h}, "
        f"s={container.s:g}, {mode}"
    )
    return EXIT_OK


def cmd_analyze_rate(args) -> int:
    images = _gather_images(args.images)
    codec = toycodec.default_codecs()[_parse_codec(args.codec)]
    table = analysis.rate_table(
        images, codec, _parse_float_list(args.qps), _parse_float_list(args.scales)
    )
    analysis.write_rate_csv(table, args.out)
    for row in table.rows:
        ratios = ", ".join(
            f"s={s:g}: {row.ratio_by_s[s]:.3f}x" for s in table.scales
        )
        print(f"qp={row.native_qp:g} bpp_orig={row.bpp_orig:.4f} [{ratios}]")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_rd_sweep(args) -> int:
    images = _gather_images(args.images)
    codec = toycodec.default_codecs()[_parse_codec(args.codec)]
    model = _load_model(args.checkpoint) if not args.no_crd else None
    points = analysis.rd_sweep(
        images,
        codec,
        _parse_float_list(args.qps),
        _parse_float_list(args.scales),
        steps=args.steps,
        seed=args.seed,
        model=model,
        metric_specs=tuple(args.metrics.split(",")),
        crd_enabled=not args.no_crd,
        calibration=corpus.calibration_images(),
    )
    analysis.write_rd_csv(points, args.out)
    print(f"wrote {len(points)} rate-distortion points to {args.out}")
    if args.plot:
        analysis.plot_rd(points, args.plot)
        print(f"wrote {args.plot}")
    return EXIT_OK


def cmd_bd_rate(args) -> int:
    anchor = analysis.read_rd_csv(args.anchor_csv)
    test = analysis.read_rd_csv(args.test_csv)
    if args.metric:
        anchor = [p for p in anchor if p.metric_name == args.metric]
        test = [p for p in test if p.metric_name == args.metric]
    value = metrics.bd_rate(anchor, test)
    print(f"BD-rate: {value:+.4f}%")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import checkpoint as ckpt
    from . import training
    from .decoder import RestorationModel

    images = _gather_images(args.data)
    config = training.TrainingConfig(
        steps=args.steps,
        crop_size=args.crop_size,
        batch=args.batch,
        lr=args.lr,
        qp_pool=tuple(_parse_float_list(args.qp_pool)),
        seed=args.seed,
        pretrain_ae_steps=args.pretrain_ae_steps,
        pretrain_backbone_steps=args.pretrain_backbone_steps,
        pretrain_lr=args.pretrain_lr,
        checkpoint_every=args.checkpoint_every,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = RestorationModel(seed=config.seed)
    if config.pretrain_ae_steps:
        trace = training.pretrain_autoencoder(
            model, images, config.pretrain_ae_steps,
            lr=config.pretrain_lr, seed=config.seed,
            crop_size=config.crop_size, batch=config.batch,
        )
        print(
            f"autoencoder pretraining: {len(trace)} steps, "
            f"loss {trace[0]:.4f} -> {trace[-1]:.4f}"
        )
    if config.pretrain_backbone_steps:
        trace = training.pretrain_backbone(
            model, images, config.pretrain_backbone_steps,
            lr=config.pretrain_lr, seed=config.seed,
            crop_size=config.crop_size, batch=config.batch,
        )
        print(
            f"backbone pretraining: {len(trace)} steps, "
            f"loss {trace[0]:.4f} -> {trace[-1]:.4f}"
        )
    rows = training.train_conditioning(
        model,
        images,
        config,
        csv_path=out_dir / "loss.csv",
        checkpoint_path=out_dir / "model.ckpt",
    )
    if rows:
        print(
            f"conditioning: {len(rows)} steps, "
            f"total loss {rows[0]['l_total']:.4f} -> {rows[-1]['l_total']:.4f}"
        )
    print(f"wrote {out_dir / 'loss.csv'} and {out_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    import torch

    from . import rescale
    from .decoder import C_LAT, RestorationModel

    checks: list[tuple[str, bool]] = []

    def check(name, ok):
        checks.append((name, bool(ok)))
        print(f"[{'pass' if ok else 'FAIL'}] {name}")

    taps = rescale.cubic_kernel(np.array([-1.5, -0.5, 0.5, 1.5]))
    check("bicubic kernel partition of unity", abs(float(taps.sum()) - 1.0) < 1e-12)
    check(
        "bicubic identity at s=1",
        np.array_equal(
            rescale.downsample(corpus.synthetic_image(0, 16, 16), 1.0),
            corpus.synthetic_image(0, 16, 16),
        ),
    )
    zz = toycodec.zigzag_order()
    check("zigzag is a permutation", sorted(zz.tolist()) == list(range(64)))
    data = b"the quick brown fox jumps over the lazy dog" * 3
    check("caption compression round trip", semantics.lz_decompress(semantics.lz_compress(data)) == data)
    img = corpus.synthetic_image(1, 24, 24)
    codec = toycodec.ToyDctCodec()
    rt = codec.decode(codec.parse(codec.encode(img, 0.0).data))
    check("toy codec near-lossless at qp=0", float(np.abs(rt - img).max()) <= 2 / 255)
    c = pipeline.CompressedContainer(
        crd_enabled=True, caption_present=False, codec_id=CodecId.TOY_DCT,
        orig_w=24, orig_h=24, s=1.5, native_qp=36.0, chi_qp=1.0,
        caption_bytes=b"", bitstream=b"\x00\x01",
    )
    check("container round trip", pipeline.deserialize(pipeline.serialize(c)) == c)
    check(
        "metric sanity",
        metrics.compute_msssim(img, img) == 1.0
        and metrics.compute_psnr(np.zeros_like(img), np.ones_like(img)) == 0.0,
    )
    model = RestorationModel()
    tokens = semantics.caption_tokenize("selftest")
    feats = semantics.FrozenConvSemanticProvider()(img).array
    cond = model.make_conditioning(img, 0.0, 1.0, 1.5, tokens, feats)
    z = torch.randn(1, C_LAT, 3, 3, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        noop = torch.equal(
            model.predict_noise(z, 10, cond), model.predict_noise(z, 10, None)
        )
    check("conditioning is a no-op at init", noop)
    failed = [name for name, ok in checks if not ok]
    if failed:
        print(f"{len(failed)} of {len(checks)} checks failed", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> _Parser:
    parser = _Parser(prog="rescomp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("compress", parents=[], help="compress an image to a container")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--input", required=True, help="input image (PNG/JPEG)")
    p.add_argument("--output", required=True, help="output container path")
    p.add_argument("--codec", default="toy-dct", choices=sorted(CODEC_NAMES))
    p.add_argument("--qp", type=float, default=36.0, help="codec-native quality")
    p.add_argument("--scale", type=float, default=1.5, help="downscale factor s >= 1")
    p.add_argument("--caption", default="", help="caption text to embed")
    p.add_argument("--no-caption", action="store_true", help="omit the caption record")
    p.add_argument("--no-crd", action="store_true", help="disable restoration at decode")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a container to an image")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--input", required=True, help="container path")
    p.add_argument("--output", required=True, help="output image path (PNG)")
    p.add_argument("--steps", type=int, default=20, help="diffusion sampling steps")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("analyze-rate", help="rate-reduction table over scales")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--images", required=True, help="image file or directory")
    p.add_argument("--codec", default="toy-dct", choices=sorted(CODEC_NAMES))
    p.add_argument("--qps", default="24,36", help="comma-separated native qps")
    p.add_argument("--scales", default="1,1.2,1.5,2", help="comma-separated scales")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_analyze_rate)

    p = sub.add_parser("rd-sweep", help="rate-distortion sweep to CSV")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--images", required=True, help="image file or directory")
    p.add_argument("--codec", default="toy-dct", choices=sorted(CODEC_NAMES))
    p.add_argument("--qps", default="12,24,36,48", help="comma-separated native qps")
    p.add_argument("--scales", default="1,1.5,2", help="comma-separated scales")
    p.add_argument("--steps", type=int, default=4, help="diffusion sampling steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", default="psnr", help="comma-separated metric specs")
    p.add_argument("--no-crd", action="store_true", help="anchor-only sweep")
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--plot", help="optional plot image path")
    p.set_defaults(func=cmd_rd_sweep)

    p = sub.add_parser("bd-rate", help="BD-rate between two R-D CSVs")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--anchor-csv", required=True)
    p.add_argument("--test-csv", required=True)
    p.add_argument("--metric", default="", help="restrict to one metric name")
    p.set_defaults(func=cmd_bd_rate)

    p = sub.add_parser("train", help="train the restoration model")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--crop-size", type=int, default=64)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--qp-pool", default="24,36,48")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrain-ae-steps", type=int, default=0)
    p.add_argument("--pretrain-backbone-steps", type=int, default=0)
    p.add_argument("--pretrain-lr", type=float, default=1e-3)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_defaults_for_sub(parser, argv)
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            print(parser.format_usage(), file=sys.stderr, end="")
            print("error: a command is required", file=sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StreamFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def _apply_config_defaults_for_sub(parser: _Parser, argv: list[str]) -> None:
    if not argv or "--config" not in argv:
        return
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            sub = action.choices.get(argv[0])
            if sub is not None:
                _apply_config_defaults(sub, argv)
            return


if __name__ == "__main__":
    sys.exit(main())
