#!/usr/bin/env python3
"""End-to-end toy training run on a synthetic corpus.

Walks the three phases programmatically: autoencoder pretraining, backbone
prior pretraining, then conditioning training with the backbone frozen.
Writes loss.csv and model.ckpt into --out and prints a short summary. With
the defaults this takes a few minutes on a laptop CPU; it is a wiring demo,
not a recipe for a good model.
"""

import argparse
from pathlib import Path

from rescomp import corpus, training
from rescomp.decoder import RestorationModel


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy", help="output directory")
    ap.add_argument("--images", type=int, default=8, help="synthetic corpus size")
    ap.add_argument("--steps", type=int, default=200, help="conditioning steps")
    ap.add_argument("--pretrain-steps", type=int, default=150)
    ap.add_argument("--crop-size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images = [corpus.synthetic_image(seed, 128, 128) for seed in range(args.images)]
    config = training.TrainingConfig(
        steps=args.steps,
        crop_size=args.crop_size,
        batch=2,
        lr=1e-4,
        seed=args.seed,
        pretrain_ae_steps=args.pretrain_steps,
        pretrain_backbone_steps=args.pretrain_steps,
        pretrain_lr=1e-3,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = RestorationModel(seed=args.seed)
    ae = training.pretrain_autoencoder(
        model, images, config.pretrain_ae_steps,
        lr=config.pretrain_lr, seed=args.seed,
        crop_size=config.crop_size, batch=config.batch,
    )
    print(f"autoencoder: {ae[0]:.4f} -> {ae[-1]:.4f} over {len(ae)} steps")
    bb = training.pretrain_backbone(
        model, images, config.pretrain_backbone_steps,
        lr=config.pretrain_lr, seed=args.seed,
        crop_size=config.crop_size, batch=config.batch,
    )
    print(f"backbone prior: {bb[0]:.4f} -> {bb[-1]:.4f} over {len(bb)} steps")
    rows = training.train_conditioning(
        model,
        images,
        config,
        csv_path=out_dir / "loss.csv",
        checkpoint_path=out_dir / "model.ckpt",
    )
    print(
        f"conditioning: l_total {rows[0]['l_total']:.4f} -> {rows[-1]['l_total']:.4f} "
        f"over {len(rows)} steps"
    )
    print(f"wrote {out_dir / 'loss.csv'} and {out_dir / 'model.ckpt'}")


if __name__ == "__main__":
    main()
