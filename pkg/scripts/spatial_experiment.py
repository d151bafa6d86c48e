"""DRN with and without latent codes of the t2m field on synthetic data.

Prints mean test CRPS of both models, the fraction of stations where the
spatial variant is better, and the pooled Diebold-Mariano test.

    python scripts/spatial_experiment.py --gamma 0.5 --length-scale 12 --method convae --h 2
"""

import argparse
import time

import numpy as np

from gridpost import bundle as bnd
from gridpost import pipeline as pl
from gridpost.convae import ConvAeConfig
from gridpost.dataio import SynthConfig, synth_generate
from gridpost.evaluation import crps_matrix, fraction_improved, pooled_dm, station_crpss
from gridpost.postproc import DrnConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gamma", type=float, default=0.5)
    ap.add_argument("--length-scale", type=float, default=12.0)
    ap.add_argument("--method", choices=("convae", "pca"), default="convae")
    ap.add_argument("--h", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=40, help="ConvAE epochs")
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.time()
    split = pl.split_dataset(synth_generate(SynthConfig(gamma=args.gamma, length_scale=args.length_scale), args.seed))
    if args.method == "convae":
        enc = pl.fit_convae(split, "t2m", ConvAeConfig(latent_dim=args.h, seed=args.seed, max_epochs=args.epochs))
        print(f"convae: best epoch {enc.best_epoch}, val mse {min(r[2] for r in enc.history):.5f}")
    else:
        enc = pl.fit_pca(split, "t2m", args.h)
    encoders = {"t2m": bnd.encoder_to_bundle(enc, "t2m")}

    scores = {}
    for mode in ("none", args.method):
        spatial = mode != "none"
        cfg = DrnConfig(spatial_mode=mode, spatial_vars=("t2m",) if spatial else (),
                        latent_dim=args.h if spatial else 0, repetitions=args.repeats, seed=args.seed)
        used = encoders if spatial else {}
        models, _, _ = pl.train_drn(split, cfg, used)
        mu, sigma = pl.drn_forecast(models, used, split.test)
        scores[mode] = crps_matrix(mu, sigma, split.test.obs)
        print(f"DRN {mode:7s} mean test CRPS {np.nanmean(scores[mode]):.5f}")

    skills = station_crpss(scores[args.method], scores["none"], split.test.stations.station_id)
    dm = pooled_dm(scores[args.method], scores["none"])
    print(f"stations improved {fraction_improved(skills):.3f}; pooled DM {dm.statistic:.3f} (p={dm.p_value:.3g})")
    print(f"elapsed {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
