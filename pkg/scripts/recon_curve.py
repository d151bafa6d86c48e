"""Reconstruction MSE of ConvAE and PCA over latent dimensions, as CSV.

    python scripts/recon_curve.py --h-list 1,2,4,8 --epochs 30 --out recon.csv
"""

import argparse

from gridpost import pipeline as pl
from gridpost.convae import ConvAeConfig
from gridpost.dataio import SynthConfig, synth_generate
from gridpost.evaluation import recon_curve, write_recon_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--h-list", default="1,2,4,8,16,32")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--length-scale", type=float, default=6.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="recon_curve.csv")
    args = ap.parse_args()

    h_list = [int(h) for h in args.h_list.split(",")]
    split = pl.split_dataset(synth_generate(SynthConfig(length_scale=args.length_scale), args.seed))
    models = {}
    for h in h_list:
        models[("pca", h)] = pl.fit_pca(split, "t2m", h)
        cfg = ConvAeConfig(latent_dim=h, seed=args.seed, max_epochs=args.epochs)
        models[("convae", h)] = pl.fit_convae(split, "t2m", cfg)
        print(f"h={h} trained", flush=True)
    splits = {"train": pl.normalized_fields(split.train, "t2m"), "test": pl.normalized_fields(split.test, "t2m")}
    rows = recon_curve(models, splits, h_list)
    write_recon_curve(args.out, rows)
    for r in rows:
        print(f"{r.method:6s} h={r.h:2d} {r.split:5s} {r.mse:.5f}")


if __name__ == "__main__":
    main()
