#!/usr/bin/env python3
"""Rate-reduction table: anchor bits per original pixel versus rescaling
factor.

Encodes a synthetic corpus at several scale factors and prints, per quality
setting, the mean bpp at each scale and its reduction ratio against s=1.
The ratio grows with s because the anchor codec sees quadratically fewer
pixels while the bpp denominator stays at the original resolution.
"""

import argparse

from rescomp import analysis, corpus
from rescomp.toycodec import ToyDctCodec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=16, help="corpus size")
    ap.add_argument("--size", type=int, default=256, help="image side length")
    ap.add_argument("--qps", default="24,36,48")
    ap.add_argument("--scales", default="1,1.2,1.5,2")
    ap.add_argument("--out", default="rates.csv", help="output CSV")
    args = ap.parse_args()

    images = [
        corpus.synthetic_image(seed, args.size, args.size)
        for seed in range(args.images)
    ]
    qps = [float(v) for v in args.qps.split(",")]
    scales = [float(v) for v in args.scales.split(",")]
    table = analysis.rate_table(images, ToyDctCodec(), qps, scales)
    header = "qp      " + "".join(f"s={s:<10g}" for s in table.scales)
    print(header)
    for row in table.rows:
        cells = "".join(
            f"{row.bpp_by_s[s]:.4f}/{row.ratio_by_s[s]:.2f}x  " for s in table.scales
        )
        print(f"{row.native_qp:<8g}{cells}")
    analysis.write_rate_csv(table, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
