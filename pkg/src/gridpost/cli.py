"""``gridpost`` command line: data generation, training, prediction and evaluation.

Exit codes: 0 ok, 2 configuration, 3 I/O or data, 4 bundle mismatch,
5 unpaired samples.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import bundle as bnd
from . import evaluation as ev
from . import pipeline as pl
from .convae import ConvAeConfig
from .dataio.dataset import file_checksums, load_dataset, save_dataset, write_manifest
from .dataio.synth import SynthConfig, synth_generate
from .errors import ConfigError, DataIOError, GridpostError, PairingError
from .postproc.drn import DrnConfig


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _int_list(text):
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _manifest(out_path, args, inputs, outputs):
    payload = {
        "command": args.command,
        "flags": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": file_checksums(inputs),
        "outputs": file_checksums(outputs),
    }
    write_manifest(out_path, payload)
    return payload


def _data_inputs(data_dir, variables=None):
    d = Path(data_dir)
    files = [d / "stations.csv", d / "observations.csv", d / "predictors.csv"]
    grids = sorted(d.glob("grids_*.gfb"))
    if variables is not None:
        grids = [g for g in grids if g.stem[len("grids_"):] in variables]
    return [f for f in files + grids if f.exists()]


def _load(args, variables=None):
    ds = load_dataset(args.data, variables=variables)
    return ds, pl.split_dataset(ds, args.train_end, args.val_end)


def _manifest_path(out):
    return Path(str(out) + ".manifest.json")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    cfg = SynthConfig(
        n_vars=args.vars, n_stations=args.stations, n_days=args.days, ens_size=args.ens,
        gamma=args.gamma, quad=args.quad, bias=args.bias, length_scale=args.length_scale,
        missing_frac=args.missing_frac,
    )
    ds = synth_generate(cfg, args.seed)
    try:
        written = save_dataset(out, ds)
    except OSError as exc:
        raise DataIOError(f"cannot write to {out}: {exc}") from exc
    payload = _manifest(out / "manifest.json", args, [], written)
    payload["synth_config"] = cfg.to_dict()
    write_manifest(out / "manifest.json", payload)
    print(json.dumps(payload["outputs"], indent=2, sort_keys=True))


def cmd_train_convae(args):
    ds, split = _load(args, [args.var])
    cfg = ConvAeConfig(
        latent_dim=args.h, pool_stride=args.pool_stride, seed=args.seed, max_epochs=args.max_epochs,
        patience=args.patience, batch_size=args.batch_size, lr=args.lr,
    )
    history = Path(args.history or str(args.out) + ".history.csv")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = pl.fit_convae(split, args.var, cfg, history_path=history, verbose=args.verbose)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    bnd.save_bundle(args.out, bnd.convae_to_bundle(model, args.var, {"seed": args.seed}))
    _manifest(_manifest_path(args.out), args, _data_inputs(args.data, [args.var]), [args.out, history])
    print(f"convae {args.var} h={args.h}: best epoch {model.best_epoch}, "
          f"val mse {min(r[2] for r in model.history):.6g}")


def cmd_train_pca(args):
    ds, split = _load(args, [args.var])
    model = pl.fit_pca(split, args.var, args.h)
    bnd.save_bundle(args.out, bnd.pca_to_bundle(model, args.var, {"seed": args.seed}))
    _manifest(_manifest_path(args.out), args, _data_inputs(args.data, [args.var]), [args.out])
    print(f"pca {args.var} h={args.h}: train mse {model.train_mse():.6g}")


def cmd_train_emos(args):
    ds, split = _load(args, [])
    params = pl.fit_emos(split.train, args.target)
    bnd.save_bundle(args.out, bnd.emos_to_bundle(params, args.target, {"seed": args.seed}))
    _manifest(_manifest_path(args.out), args, _data_inputs(args.data, []), [args.out])
    print(f"emos: {len(params)} stations, mean train CRPS {float(np.mean(params.train_crps)):.6g}")


def _drn_config(args, embed_dim=None):
    spatial_vars = _csv_list(args.spatial_vars)
    if args.spatial == "none" and spatial_vars:
        raise ConfigError("--spatial-vars given with --spatial none")
    if args.spatial != "none" and not spatial_vars:
        raise ConfigError(f"--spatial {args.spatial} needs --spatial-vars")
    if args.spatial != "none" and args.h is None:
        raise ConfigError(f"--spatial {args.spatial} needs --h")
    return DrnConfig(
        embedding_dim=args.embed_dim if embed_dim is None else embed_dim,
        spatial_mode=args.spatial, spatial_vars=tuple(spatial_vars),
        latent_dim=args.h if args.spatial != "none" else 0,
        lr=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs, patience=args.patience,
        repetitions=args.repeats, seed=args.seed,
    )


def _load_encoders(paths):
    encoders = {}
    for p in paths:
        b = bnd.load_bundle(p)
        var = b.meta.get("variable")
        if var in encoders:
            raise ConfigError(f"two encoder bundles for variable {var!r}")
        encoders[var] = b
    return encoders


def cmd_train_drn(args):
    cfg = _drn_config(args)
    encoder_paths = _csv_list(args.encoders)
    encoders = _load_encoders(encoder_paths)
    pl.check_encoders(encoders, cfg.spatial_mode, cfg.spatial_vars, cfg.latent_dim)
    ds, split = _load(args, list(cfg.spatial_vars))
    models, layout, _ = pl.train_drn(split, cfg, encoders, verbose=args.verbose)
    b = bnd.drn_to_bundle(models, args.target, encoders, {"seed": args.seed})
    bnd.save_bundle(args.out, b)
    _manifest(_manifest_path(args.out), args,
              _data_inputs(args.data, list(cfg.spatial_vars)) + encoder_paths, [args.out])
    print(f"drn ({cfg.spatial_mode}): {len(models)} repetitions, {layout.width} features, "
          f"best epochs {[m.best_epoch for m in models]}")


def _subset(ds, split, name):
    return ds if name == "all" else getattr(split, name)


def _bundle_vars(b):
    if b.kind == "drn":
        return list(b.meta["layout"]["spatial_vars"])
    return []


def cmd_predict(args):
    b = bnd.load_bundle(args.bundle)
    ds, split = _load(args, _bundle_vars(b))
    part = _subset(ds, split, args.split)
    mu, sigma = pl.bundle_forecast(b, part)
    ev.write_forecasts(args.out, part.dates, [str(s) for s in part.stations.station_id], mu, sigma)
    _manifest(_manifest_path(args.out), args, _data_inputs(args.data, _bundle_vars(b)) + [args.bundle],
              [args.out])
    print(f"wrote {mu.size} forecasts to {args.out}")


def read_forecasts(path, part):
    """Align a ``date,station_id,mu,sigma`` CSV with a dataset; every observed pair must be present."""
    p = Path(path)
    if not p.is_file():
        raise DataIOError(f"forecast file not found: {p}")
    rows = {}
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["date", "station_id", "mu", "sigma"]:
            raise DataIOError(f"{p}: unexpected header {header}")
        for line, r in enumerate(reader, start=2):
            try:
                rows[(r[0], r[1])] = (float(r[2]), float(r[3]))
            except (ValueError, IndexError) as exc:
                raise DataIOError(f"{p}: line {line}: {exc}") from exc
    shape = part.obs.shape
    mu, sigma = np.full(shape, np.nan), np.full(shape, np.nan)
    missing = []
    for t, d in enumerate(part.dates):
        for s, sid in enumerate(part.stations.station_id):
            v = rows.get((d, str(sid)))
            if v is None:
                if not np.isnan(part.obs[t, s]):
                    missing.append(f"{d}/{sid}")
                continue
            mu[t, s], sigma[t, s] = v
    if missing:
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise PairingError(f"{p}: no forecast for {', '.join(missing[:10])}{more}")
    return mu, sigma


def _scores(args, which, part):
    bundle_path = getattr(args, which)
    fc_path = getattr(args, which + "_forecast")
    if bundle_path and fc_path:
        raise ConfigError(f"give either --{which} or --{which}-forecast, not both")
    if fc_path:
        mu, sigma = read_forecasts(fc_path, part)
        sigma = np.where(np.isnan(part.obs), 1.0, sigma)
        mu = np.where(np.isnan(part.obs), 0.0, mu)
        return ev.crps_matrix(mu, sigma, part.obs), [fc_path]
    if bundle_path:
        b = bnd.load_bundle(bundle_path)
        mu, sigma = pl.bundle_forecast(b, part)
        return ev.crps_matrix(mu, sigma, part.obs), [bundle_path]
    return None, []


def cmd_evaluate(args):
    variables = []
    for p in (args.bundle, args.reference):
        if p:
            variables += _bundle_vars(bnd.load_bundle(p))
    ds, split = _load(args, sorted(set(variables)))
    part = _subset(ds, split, args.split)
    scores, inputs = _scores(args, "bundle", part)
    if scores is None:
        raise ConfigError("evaluate needs --bundle or --bundle-forecast")
    ref, ref_inputs = _scores(args, "reference", part)
    ids = [str(s) for s in part.stations.station_id]
    valid = ~np.isnan(scores)
    if not valid.any():
        raise PairingError("no valid forecast/observation pairs")
    overall = float(np.nanmean(scores))
    if ref is None:
        rows = [("ALL", int(valid.sum()), overall)]
        for s, sid in enumerate(ids):
            ok = valid[:, s]
            rows.append((sid, int(ok.sum()), float(scores[ok, s].mean()) if ok.any() else float("nan")))
        ev.write_csv(args.out, ["station_id", "n", "crps"], rows)
    else:
        skills = ev.station_crpss(scores, ref, ids, part.dates)
        pooled = ev.pooled_dm(scores, ref, part.dates)
        ref_mean = float(np.nanmean(ref))
        all_row = ev.StationSkill("ALL", int(valid.sum()), overall, ref_mean,
                                  1.0 - overall / ref_mean, pooled.statistic, pooled.p_value)
        ev.write_station_skill(args.out, [all_row] + skills)
        print(f"stations improved: {ev.fraction_improved(skills):.3f}; "
              f"pooled DM {pooled.statistic:.4g} (p={pooled.p_value:.4g})")
    _manifest(_manifest_path(args.out), args, _data_inputs(args.data, variables) + inputs + ref_inputs,
              [args.out])
    print(f"mean CRPS {overall:.6g} over {int(valid.sum())} pairs "
          f"({int(np.isnan(part.obs).sum())} missing observations skipped)")


def cmd_importance(args):
    b = bnd.load_bundle(args.bundle, kind="drn")
    models, encoders = bnd.drn_from_bundle(b)
    if args.repeats > len(models):
        raise ConfigError(f"--repeats {args.repeats} exceeds the {len(models)} repetitions in the bundle")
    ds, split = _load(args, _bundle_vars(b))
    part = _subset(ds, split, args.split)
    fm = pl.drn_features(models, encoders, part)
    fm = fm.take(np.flatnonzero(~np.isnan(fm.y)))
    rows = ev.permutation_importance(models, fm, models[0].layout, seed=args.seed,
                                     features=_csv_list(args.features) or None, n_repeats=args.repeats)
    ev.write_importance(args.out, rows)
    _manifest(_manifest_path(args.out), args, _data_inputs(args.data, _bundle_vars(b)) + [args.bundle],
              [args.out])
    top = max(rows, key=lambda r: r.mean_delta)
    print(f"most important: {top.feature} (delta CRPS {top.mean_delta:.4g})")


def cmd_recon_curve(args):
    ds, split = _load(args, [args.var])
    methods = _csv_list(args.methods)
    h_list = args.h_list
    models, paths = {}, []
    for method in methods:
        if method not in ("convae", "pca"):
            raise ConfigError(f"unknown method {method!r}")
        for h in h_list:
            p = Path(args.bundle_dir) / f"{method}_{args.var}_h{h}.mbd"
            if not p.is_file():
                raise DataIOError(f"missing {method} bundle for h={h}: {p}")
            b = bnd.load_bundle(p, kind=method)
            if int(b.meta.get("latent_dim", -1)) != h or b.meta.get("variable") != args.var:
                raise bnd.BundleError(f"{p}: bundle is for {b.meta.get('variable')} h={b.meta.get('latent_dim')}")
            models[(method, h)] = bnd.encoder_from_bundle(b)
            paths.append(p)
    splits = {"train": pl.normalized_fields(split.train, args.var),
              "test": pl.normalized_fields(split.test, args.var)}
    rows = ev.recon_curve(models, splits, h_list, methods)
    ev.write_recon_curve(args.out, rows)
    _manifest(_manifest_path(args.out), args, _data_inputs(args.data, [args.var]) + paths, [args.out])
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_embed_sweep(args):
    cfg = _drn_config(args, embed_dim=1)
    encoder_paths = _csv_list(args.encoders)
    encoders = _load_encoders(encoder_paths)
    pl.check_encoders(encoders, cfg.spatial_mode, cfg.spatial_vars, cfg.latent_dim)
    ds, split = _load(args, list(cfg.spatial_vars))
    codes = {k: pl.latent_codes(encoders, getattr(split, k)) if encoders else None for k in pl.SPLITS}
    from .postproc.features import assemble_features, fit_layout

    layout = fit_layout(split.train, cfg.spatial_mode, cfg.spatial_vars, cfg.latent_dim, codes["train"])
    fms = [assemble_features(getattr(split, k), layout, codes[k]) for k in pl.SPLITS]
    rows = ev.embed_sweep(cfg, args.dims, layout, *fms, verbose=args.verbose)
    ev.write_sweep(args.out, rows)
    _manifest(_manifest_path(args.out), args,
              _data_inputs(args.data, list(cfg.spatial_vars)) + encoder_paths, [args.out])
    for r in rows:
        print(f"embed_dim {r.embed_dim}: mean CRPS {r.mean_crps:.6g}")


# -------------------------------------------------------------------- parser


def _add_data(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--train-end", default=None, help="last training date (default: third-last year)")
    p.add_argument("--val-end", default=None, help="last validation date (default: second-last year)")


def _add_drn(p):
    p.add_argument("--spatial", choices=("none", "convae", "pca"), default="none")
    p.add_argument("--spatial-vars", default="", help="comma-separated spatial variables")
    p.add_argument("--h", type=int, default=None, help="latent dimension of the encoders")
    p.add_argument("--encoders", default="", help="comma-separated encoder bundle paths")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--target", default="t2m")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="gridpost", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gridpost {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--vars", type=int, default=4)
    p.add_argument("--stations", type=int, default=50)
    p.add_argument("--days", type=int, default=1080)
    p.add_argument("--ens", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--quad", type=float, default=0.0)
    p.add_argument("--bias", type=float, default=1.0)
    p.add_argument("--length-scale", type=float, default=6.0)
    p.add_argument("--missing-frac", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-convae", help="train a convolutional autoencoder for one variable")
    _add_data(p)
    p.add_argument("--var", required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool-stride", type=int, default=3)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--history", default=None, help="history CSV (default: <out>.history.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_convae)

    p = sub.add_parser("train-pca", help="fit PCA on one variable's normalized fields")
    _add_data(p)
    p.add_argument("--var", required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_pca)

    p = sub.add_parser("train-emos", help="fit per-station EMOS")
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--target", default="t2m")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_emos)

    p = sub.add_parser("train-drn", help="train the distributional regression network")
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", type=int, default=15)
    _add_drn(p)
    p.set_defaults(func=cmd_train_drn)

    p = sub.add_parser("predict", help="write date,station_id,mu,sigma forecasts")
    _add_data(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="mean and per-station CRPS, optional skill vs a reference")
    _add_data(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--bundle-forecast", default=None, help="forecast CSV instead of a bundle")
    p.add_argument("--reference", default=None)
    p.add_argument("--reference-forecast", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("importance", help="permutation feature importance of a DRN bundle")
    _add_data(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=10, help="number of repetitions to evaluate")
    p.add_argument("--features", default="", help="comma-separated subset of features")
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("recon-curve", help="reconstruction MSE over latent dimensions")
    _add_data(p)
    p.add_argument("--var", required=True)
    p.add_argument("--h-list", type=_int_list, default=[1, 2, 4, 8, 16, 32])
    p.add_argument("--methods", default="convae,pca")
    p.add_argument("--bundle-dir", required=True, help="holds <method>_<var>_h<h>.mbd bundles")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recon_curve)

    p = sub.add_parser("embed-sweep", help="mean test CRPS over station-embedding dimensions")
    _add_data(p)
    p.add_argument("--dims", type=_int_list, default=[2, 5, 10, 15, 20])
    p.add_argument("--out", required=True)
    _add_drn(p)
    p.set_defaults(func=cmd_embed_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except GridpostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
