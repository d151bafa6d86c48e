"""End-to-end steps shared by the command line and the experiment scripts."""

from __future__ import annotations

from dataclasses import replace

from . import bundle as bnd
from .convae import ConvAeConfig, build
from .convae import train as train_convae
from .dataio.dataset import Dataset, chronological_split, default_split_dates
from .dataio.grid import minmax_normalize_stack
from .errors import BundleError, ConfigError, DataError
from .pca import pca_fit
from .postproc.drn import DrnConfig, drn_predict_aggregate, drn_train
from .postproc.emos import emos_fit, emos_predict
from .postproc.features import assemble_features, encode_fields, fit_layout

SPLITS = ("train", "validation", "test")


def split_dataset(ds: Dataset, train_end=None, val_end=None):
    if train_end is None or val_end is None:
        dt, dv = default_split_dates(ds.dates)
        train_end, val_end = train_end or dt, val_end or dv
    return chronological_split(ds, train_end, val_end)


def normalized_fields(ds: Dataset, variable: str):
    if variable not in ds.fields:
        raise DataError(f"no grid data for variable {variable!r}; available: {sorted(ds.fields)}")
    return minmax_normalize_stack(ds.fields[variable].astype(float))[0]


def fit_convae(split, variable, config: ConvAeConfig, history_path=None, verbose=False):
    model = build(config)
    return train_convae(model, normalized_fields(split.train, variable),
                        normalized_fields(split.validation, variable),
                        history_path=history_path, verbose=verbose)


def fit_pca(split, variable, h):
    x = normalized_fields(split.train, variable)
    return pca_fit(x, h)


def target_columns(ds: Dataset, target: str):
    names = (f"{target}_mean", f"{target}_sd")
    for n in names:
        if n not in ds.predictor_names:
            raise DataError(f"predictor {n!r} not found; available: {ds.predictor_names}")
    return [ds.predictor_names.index(n) for n in names]


def fit_emos(train: Dataset, target="t2m"):
    i, j = target_columns(train, target)
    return emos_fit(train.predictors[:, :, i], train.predictors[:, :, j], train.obs,
                    station_ids=[str(s) for s in train.stations.station_id])


def emos_forecast(params, ds: Dataset, target="t2m"):
    ids = [str(s) for s in ds.stations.station_id]
    if ids != [str(s) for s in params.station_ids]:
        lookup = {s: k for k, s in enumerate(params.station_ids)}
        unknown = [s for s in ids if s not in lookup]
        if unknown:
            raise DataError(f"stations without EMOS coefficients: {', '.join(unknown)}")
        idx = [lookup[s] for s in ids]
        params = replace(params, a=params.a[idx], b=params.b[idx], c=params.c[idx], d=params.d[idx],
                         station_ids=ids)
    i, j = target_columns(ds, target)
    return emos_predict(params, ds.predictors[:, :, i], ds.predictors[:, :, j])


def check_encoders(encoders: dict, spatial_mode: str, spatial_vars, latent_dim: int):
    """Validate ``{var: encoder Bundle}`` against the requested spatial configuration."""
    if spatial_mode == "none":
        if encoders:
            raise ConfigError("encoder bundles given but spatial mode is 'none'")
        return
    for var in spatial_vars:
        if var not in encoders:
            raise BundleError(f"no encoder bundle for spatial variable {var!r}")
    for var, b in encoders.items():
        if var not in spatial_vars:
            raise BundleError(f"encoder bundle for {var!r} not among spatial variables {list(spatial_vars)}")
        if b.kind != spatial_mode:
            raise BundleError(f"encoder for {var!r} is a {b.kind!r} bundle, spatial mode is {spatial_mode!r}")
        if int(b.meta.get("latent_dim", -1)) != int(latent_dim):
            raise BundleError(f"encoder for {var!r} has h={b.meta.get('latent_dim')}, expected h={latent_dim}")
        if b.meta.get("variable") != var:
            raise BundleError(f"encoder bundle variable {b.meta.get('variable')!r} != {var!r}")


def latent_codes(encoders: dict, ds: Dataset):
    """``{var: (D, h)}`` codes of every date in ``ds`` from frozen encoders."""
    out = {}
    for var, b in encoders.items():
        if var not in ds.fields:
            raise DataError(f"no grid data for spatial variable {var!r}")
        out[var] = encode_fields(bnd.encoder_from_bundle(b), ds.fields[var])
    return out


def train_drn(split, config: DrnConfig, encoders=None, verbose=False):
    """Fit the layout on the training split and train all repetitions."""
    encoders = encoders or {}
    check_encoders(encoders, config.spatial_mode, config.spatial_vars, config.latent_dim)
    codes = {k: latent_codes(encoders, getattr(split, k)) if encoders else None for k in SPLITS}
    layout = fit_layout(split.train, config.spatial_mode, config.spatial_vars, config.latent_dim,
                        codes["train"])
    train = assemble_features(split.train, layout, codes["train"])
    val = assemble_features(split.validation, layout, codes["validation"])
    models = drn_train(config, layout, train, val, verbose=verbose)
    return models, layout, codes


def drn_features(models, encoders, ds: Dataset):
    layout = models[0].layout
    codes = latent_codes(encoders, ds) if encoders else None
    return assemble_features(ds, layout, codes, keep_missing=True)


def drn_forecast(models, encoders, ds: Dataset):
    """Aggregated forecast reshaped to ``(D, S)`` arrays."""
    fm = drn_features(models, encoders, ds)
    f = drn_predict_aggregate(models, fm)
    shape = ds.obs.shape
    return f.mu.reshape(shape), f.sigma.reshape(shape)


def bundle_forecast(b, ds: Dataset):
    """``(mu, sigma)`` of shape (D, S) from an EMOS or DRN bundle."""
    if b.kind == "emos":
        f = emos_forecast(bnd.emos_from_bundle(b), ds, b.meta.get("target", "t2m"))
        return f.mu, f.sigma
    if b.kind == "drn":
        models, encoders = bnd.drn_from_bundle(b)
        return drn_forecast(models, encoders, ds)
    raise BundleError(f"bundle kind {b.kind!r} does not produce forecasts")
