#!/usr/bin/env python3
"""Rate-distortion sweep demo: anchor-only versus rescaled operating points.

Sweeps the toy codec over a quality grid twice; once at s=1 (plain anchor)
and once at a rescaled operating point, then reports the BD-rate of the
rescaled curve against the anchor curve. Restoration is off by default so
the demo runs in seconds; pass --checkpoint to decode through a trained
model instead.
"""

import argparse

from rescomp import analysis, corpus, metrics
from rescomp.toycodec import ToyDctCodec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=6, help="corpus size")
    ap.add_argument("--size", type=int, default=128, help="image side length")
    ap.add_argument("--qps", default="6,18,30,42")
    ap.add_argument("--scale", type=float, default=1.5, help="test-curve rescaling factor")
    ap.add_argument("--steps", type=int, default=4, help="sampling steps when restoring")
    ap.add_argument("--checkpoint", help="trained model checkpoint (enables restoration)")
    ap.add_argument("--anchor-out", default="rd_anchor.csv")
    ap.add_argument("--test-out", default="rd_rescaled.csv")
    ap.add_argument("--plot", help="optional plot path (needs matplotlib)")
    args = ap.parse_args()

    images = [
        corpus.synthetic_image(seed, args.size, args.size)
        for seed in range(args.images)
    ]
    qps = [float(v) for v in args.qps.split(",")]
    codec = ToyDctCodec()
    calibration = corpus.calibration_images()

    model = None
    restore = args.checkpoint is not None
    if restore:
        from rescomp.checkpoint import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)

    anchor = analysis.rd_sweep(
        images, codec, qps, [1.0], crd_enabled=False, calibration=calibration
    )
    test = analysis.rd_sweep(
        images, codec, qps, [args.scale],
        steps=args.steps, model=model, crd_enabled=restore, calibration=calibration,
    )
    analysis.write_rd_csv(anchor, args.anchor_out)
    analysis.write_rd_csv(test, args.test_out)
    print(f"wrote {args.anchor_out} and {args.test_out}")
    delta = metrics.bd_rate(anchor, test)
    mode = f"restored, {args.steps} steps" if restore else "no restoration"
    print(f"BD-rate of s={args.scale:g} curve vs anchor ({mode}): {delta:+.2f}%")
    if args.plot:
        analysis.plot_rd(anchor + test, args.plot)
        print(f"wrote {args.plot}")


if __name__ == "__main__":
    main()
