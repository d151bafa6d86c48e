"""Feature assembly for the station-level networks.

Column order is fixed: interpolated predictors, station metadata, then latent
codes grouped per spatial variable. Continuous columns are standardized with
training-set constants; the station embedding index travels separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dataio.dataset import META_NAMES, Dataset
from ..dataio.grid import minmax_normalize_stack
from ..errors import ConfigError, DataError, DimensionError

SPATIAL_MODES = ("none", "convae", "pca")


@dataclass
class FeatureLayout:
    predictor_names: list
    meta_names: list
    spatial_mode: str = "none"
    spatial_vars: list = field(default_factory=list)
    latent_dim: int = 0
    station_ids: list = field(default_factory=list)
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None

    def __post_init__(self):
        if self.spatial_mode not in SPATIAL_MODES:
            raise ConfigError(f"spatial_mode must be one of {SPATIAL_MODES}, got {self.spatial_mode!r}")
        if (self.spatial_mode == "none") != (not self.spatial_vars):
            raise ConfigError("spatial variables are required iff spatial_mode != 'none'")

    @property
    def code_names(self):
        return [f"{v}_code{k}" for v in self.spatial_vars for k in range(self.latent_dim)]

    @property
    def names(self):
        return list(self.predictor_names) + list(self.meta_names) + self.code_names

    @property
    def width(self):
        return len(self.names)

    def groups(self):
        """Permutation groups: one per predictor / meta column, one per spatial variable."""
        out = {n: [i] for i, n in enumerate(self.predictor_names + self.meta_names)}
        base = len(self.predictor_names) + len(self.meta_names)
        for j, v in enumerate(self.spatial_vars):
            start = base + j * self.latent_dim
            out[f"{v}_codes"] = list(range(start, start + self.latent_dim))
        return out

    def to_dict(self):
        return {
            "predictor_names": list(self.predictor_names),
            "meta_names": list(self.meta_names),
            "spatial_mode": self.spatial_mode,
            "spatial_vars": list(self.spatial_vars),
            "latent_dim": int(self.latent_dim),
            "station_ids": [str(s) for s in self.station_ids],
            "mean": None if self.mean is None else [float(v) for v in self.mean],
            "sd": None if self.sd is None else [float(v) for v in self.sd],
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("mean", "sd"):
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)

    def same_structure(self, other) -> bool:
        return self.to_dict() == other.to_dict()


@dataclass
class FeatureMatrix:
    """Flattened (date, station) samples with observed targets only, date-major."""

    x: np.ndarray  # (N, F) standardized
    station: np.ndarray  # (N,) embedding index
    y: np.ndarray  # (N,) observations, NaN allowed when keep_missing
    date_index: np.ndarray  # (N,)
    station_index: np.ndarray  # (N,) position in the source dataset's station table

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        return FeatureMatrix(self.x[idx], self.station[idx], self.y[idx],
                             self.date_index[idx], self.station_index[idx])


def encode_fields(encoder, stack):
    """Latent codes ``(D, h)`` for raw fields ``(D, nlat, nlon)``.

    Each field is min-max normalized on its own before encoding; ``encoder``
    is a ``ConvAeModel`` or ``PcaModel``.
    """
    from ..convae import ConvAeModel
    from ..pca import PcaModel, pca_encode

    x01, _, _ = minmax_normalize_stack(np.asarray(stack, dtype=float))
    if isinstance(encoder, ConvAeModel):
        return encoder.encode(x01).astype(float)
    if isinstance(encoder, PcaModel):
        return pca_encode(encoder, x01.reshape(len(x01), -1))
    raise ConfigError(f"unsupported encoder type {type(encoder).__name__}")


def raw_features(ds: Dataset, layout: FeatureLayout, codes=None):
    """Unstandardized ``(D, S, F)`` cube in ``layout`` order."""
    missing = [n for n in layout.predictor_names if n not in ds.predictor_names]
    if missing:
        raise DataError(f"dataset lacks predictors: {', '.join(missing)}")
    col = [ds.predictor_names.index(n) for n in layout.predictor_names]
    d, s = ds.obs.shape
    parts = [ds.predictors[:, :, col]]
    meta = ds.stations.meta()[:, [META_NAMES.index(n) for n in layout.meta_names]]
    parts.append(np.broadcast_to(meta[None], (d, s, len(layout.meta_names))))
    codes = codes or {}
    if layout.spatial_mode != "none":
        for v in layout.spatial_vars:
            if v not in codes:
                raise ConfigError(f"latent codes for spatial variable {v!r} not supplied")
            c = np.asarray(codes[v], dtype=float)
            if c.shape != (d, layout.latent_dim):
                raise DimensionError(f"codes for {v} have shape {c.shape}, expected {(d, layout.latent_dim)}")
            parts.append(np.broadcast_to(c[:, None, :], (d, s, layout.latent_dim)))
    elif codes:
        raise ConfigError("latent codes supplied but spatial_mode is 'none'")
    return np.concatenate(parts, axis=-1)


def fit_layout(ds: Dataset, spatial_mode="none", spatial_vars=(), latent_dim=0, codes=None,
               predictor_names=None, meta_names=None) -> FeatureLayout:
    """Layout with standardization constants from the training dataset ``ds``."""
    layout = FeatureLayout(
        list(ds.predictor_names if predictor_names is None else predictor_names),
        list(META_NAMES if meta_names is None else meta_names),
        spatial_mode, list(spatial_vars), int(latent_dim) if spatial_mode != "none" else 0,
        [str(s) for s in ds.stations.station_id],
    )
    cube = raw_features(ds, layout, codes)
    flat = cube.reshape(-1, cube.shape[-1])
    layout.mean = flat.mean(axis=0)
    sd = flat.std(axis=0)
    layout.sd = np.where(sd > 0, sd, 1.0)
    return layout


def assemble_features(ds: Dataset, layout: FeatureLayout, codes=None, keep_missing=False) -> FeatureMatrix:
    """Standardized feature matrix for every (date, station) of ``ds``.

    Samples with a missing observation are dropped unless ``keep_missing``.
    Stations absent from ``layout.station_ids`` raise ``DataError``.
    """
    lookup = {s: i for i, s in enumerate(layout.station_ids)}
    unknown = [str(s) for s in ds.stations.station_id if str(s) not in lookup]
    if unknown:
        raise DataError(f"stations without a trained embedding: {', '.join(unknown)}")
    cube = raw_features(ds, layout, codes)
    d, s, f = cube.shape
    x = ((cube - layout.mean) / layout.sd).reshape(d * s, f)
    emb = np.array([lookup[str(sid)] for sid in ds.stations.station_id], dtype=np.int64)
    station = np.tile(emb, d)
    y = ds.obs.reshape(-1)
    date_index = np.repeat(np.arange(d), s)
    station_index = np.tile(np.arange(s), d)
    fm = FeatureMatrix(x, station, y, date_index, station_index)
    if not keep_missing:
        fm = fm.take(np.flatnonzero(~np.isnan(y)))
    if not np.all(np.isfinite(fm.x)):
        raise DataError("assembled features contain non-finite values")
    return fm
