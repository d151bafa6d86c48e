"""Synthetic stand-in for a gridded ensemble archive plus station observations.

Per day and variable the truth is a Gaussian random field (white noise
smoothed with a Gaussian kernel of ``length_scale`` grid cells, then
standardized per field). Ensemble members add a fixed smooth bias and
correlated noise; the exported field is the ensemble mean. Observations of
the target variable (variable 0) are

    obs = truth0(station) + gamma * <P, truth0> + quad * (truth1(station)^2 - 1)
          + station offset - lapse * (altitude - orography) + noise

where ``P`` is a fixed large-scale east-west dipole scaled so that
``<P, truth0>`` has unit variance. Only spatial inputs can recover the gamma
term. Dates follow a 360-day calendar (twelve 30-day months).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.fft import irfft2, next_fast_len, rfft2

from ..errors import ConfigError
from ..rng import stream
from .dataset import Dataset, StationTable, round_sig
from .grid import GridSpec, bilinear_weights

VARIABLE_NAMES = ("t2m", "z500", "u850", "v850")


def variable_names(n_vars: int):
    return [VARIABLE_NAMES[k] if k < len(VARIABLE_NAMES) else f"syn{k}" for k in range(n_vars)]


@dataclass
class SynthConfig:
    n_vars: int = 4
    n_stations: int = 50
    n_days: int = 1080
    ens_size: int = 20
    length_scale: float = 6.0
    bias: float = 1.0
    gamma: float = 0.5
    spread: float = 0.5
    obs_noise: float = 0.5
    spread_var: float = 0.3
    quad: float = 0.0
    station_bias_sd: float = 0.5
    lapse: float = 0.002
    missing_frac: float = 0.0
    start_year: int = 2007
    station_box: tuple = (47.5, 55.0, 6.0, 15.0)
    grid: GridSpec = field(default_factory=GridSpec)

    def validate(self):
        if self.n_stations < 1:
            raise ConfigError("n_stations must be >= 1")
        if self.n_days < 30:
            raise ConfigError("n_days must be >= 30")
        if self.length_scale <= 0:
            raise ConfigError("length_scale must be positive")
        if self.n_vars < 1:
            raise ConfigError("n_vars must be >= 1")
        if self.ens_size < 2:
            raise ConfigError("ens_size must be >= 2")
        if min(self.spread, self.obs_noise, self.station_bias_sd, self.spread_var) < 0:
            raise ConfigError("noise scales must be non-negative")
        if not 0 <= self.missing_frac < 1:
            raise ConfigError("missing_frac must lie in [0, 1)")
        lat_lo, lat_hi, lon_lo, lon_hi = self.station_box
        g = self.grid
        if not (g.contains(lat_lo, lon_lo) and g.contains(lat_hi, lon_hi)):
            raise ConfigError("station box must lie inside the grid")

    def to_dict(self):
        d = asdict(self)
        d["station_box"] = list(self.station_box)
        return d


def calendar_dates(n_days: int, start_year: int = 2007):
    d = np.arange(n_days)
    return [f"{start_year + i // 360:04d}-{(i % 360) // 30 + 1:02d}-{i % 30 + 1:02d}" for i in d]


class FieldSampler:
    """Draws standardized Gaussian random fields on an ``nlat x nlon`` window.

    Noise lives on a periodic domain padded by ``3 * length_scale`` on each
    side; wrap-around correlation inside the window is below exp(-9).
    """

    def __init__(self, shape, length_scale):
        self.shape = tuple(shape)
        pad = int(np.ceil(3 * length_scale))
        self.pshape = tuple(next_fast_len(n + 2 * pad) for n in self.shape)
        ky = 2 * np.pi * np.fft.fftfreq(self.pshape[0])
        kx = 2 * np.pi * np.fft.rfftfreq(self.pshape[1])
        k2 = ky[:, None] ** 2 + kx[None, :] ** 2
        self.transfer = np.exp(-0.5 * k2 * length_scale**2).astype(np.float32)
        full = np.exp(-k2 * length_scale**2)
        # mean of |G|^2 over the full (not half) spectrum
        weights = np.full(kx.shape, 2.0)
        weights[0] = 1.0
        if self.pshape[1] % 2 == 0:
            weights[-1] = 1.0
        self.sd = float(np.sqrt((full * weights).sum() / np.prod(self.pshape)))
        self.length_scale = length_scale

    def raw(self, rng, n):
        w = rng.standard_normal((n,) + self.pshape, dtype=np.float32)
        f = irfft2(rfft2(w, axes=(-2, -1)) * self.transfer, s=self.pshape, axes=(-2, -1))
        return f[:, : self.shape[0], : self.shape[1]].astype(float)

    def standardized(self, rng, n):
        """Fields with exactly zero mean and unit sd each."""
        f = self.raw(rng, n)
        f = f - f.mean(axis=(1, 2), keepdims=True)
        return f / f.std(axis=(1, 2), keepdims=True)

    def unit_variance(self, rng, n):
        """Fields scaled by the theoretical sd (marginal variance 1, not per-field exact)."""
        return self.raw(rng, n) / self.sd

    def projection_sd(self, pattern):
        """Theoretical sd of ``<pattern, f>`` for unit-variance fields ``f``."""
        p = np.zeros(self.pshape)
        p[: self.shape[0], : self.shape[1]] = pattern
        ph = np.fft.fft2(p)
        gfull = np.exp(-0.5 * (
            (2 * np.pi * np.fft.fftfreq(self.pshape[0]))[:, None] ** 2
            + (2 * np.pi * np.fft.fftfreq(self.pshape[1]))[None, :] ** 2
        ) * self.length_scale**2)
        var = (np.abs(ph) ** 2 * gfull**2).sum() / np.prod(self.pshape)
        return float(np.sqrt(var)) / self.sd

    def correlation(self, dist_cells):
        """Correlation of the smoothed field at the given separations."""
        return np.exp(-np.asarray(dist_cells) ** 2 / (4.0 * self.length_scale**2))


def large_scale_pattern(grid: GridSpec):
    """Zero-mean east-west dipole tapered towards the northern/southern edges."""
    u = np.linspace(-1.0, 1.0, grid.nlon)
    v = np.linspace(-1.0, 1.0, grid.nlat)
    return np.cos(0.5 * np.pi * v)[:, None] * np.sin(0.5 * np.pi * u)[None, :]


def _smooth_map(grid, rng, length_scale):
    f = FieldSampler(grid.shape, length_scale).standardized(rng, 1)[0]
    return f / np.abs(f).max()


def synth_generate(config: SynthConfig, seed: int) -> Dataset:
    """Generate a full dataset. Deterministic in ``(config, seed)``.

    ``Dataset.extras`` holds generator internals used by tests and oracles:
    ``truth`` (D, V, nlat, nlon), ``pattern``, ``signal`` (D,),
    ``truth_station`` (D, S, V), ``members`` (D, S, M) of the target
    variable, ``ideal_mu`` / ``ideal_sigma`` (D, S) and ``station_offset``.
    """
    cfg = config
    cfg.validate()
    grid = cfg.grid
    names = variable_names(cfg.n_vars)
    D, S, M, V = cfg.n_days, cfg.n_stations, cfg.ens_size, cfg.n_vars
    dates = calendar_dates(D, cfg.start_year)

    # stations
    rs = stream(seed, "synth.stations")
    lat_lo, lat_hi, lon_lo, lon_hi = cfg.station_box
    lat = np.round(rs.uniform(lat_lo, lat_hi, S), 4)
    lon = np.round(rs.uniform(lon_lo, lon_hi, S), 4)
    orog_field = 600.0 * (1.0 + _smooth_map(grid, stream(seed, "synth.orography"), 10.0))
    bw = bilinear_weights(grid, lat, lon)
    orography = np.round(bw.apply(orog_field), 1)
    altitude = np.round(np.maximum(orography + rs.normal(0.0, 100.0, S), 0.0), 1)
    station_offset = rs.normal(0.0, cfg.station_bias_sd, S)
    station_ids = np.array([f"S{i:04d}" for i in range(S)], dtype=object)

    truth_sampler = FieldSampler(grid.shape, cfg.length_scale)
    pattern = large_scale_pattern(grid)
    pattern = pattern / truth_sampler.projection_sd(pattern)

    # member noise at stations: spatially correlated across stations, iid across members
    row, col = grid.fractional_index(lat, lon)
    dist = np.hypot(row[:, None] - row[None, :], col[:, None] - col[None, :])
    chol = np.linalg.cholesky(truth_sampler.correlation(dist) + 1e-8 * np.eye(S))

    rday = stream(seed, "synth.spread")
    spread_mult = np.exp(cfg.spread_var * rday.standard_normal(D))

    fields, truth_all = {}, np.empty((D, V, *grid.shape), dtype=np.float32)
    truth_station = np.empty((D, S, V))
    predictors = np.empty((D, S, 2 * V))
    members_target = None
    for k, var in enumerate(names):
        rt = stream(seed, "synth.truth", k)
        rn = stream(seed, "synth.noise", k)
        bias_field = cfg.bias * (1.0 + 0.5 * _smooth_map(grid, stream(seed, "synth.bias", k), 15.0))
        # round through float32 so the emitted fields reproduce every derived value
        truth = truth_sampler.standardized(rt, D).astype(np.float32).astype(float)
        mean_noise = truth_sampler.unit_variance(rn, D) / np.sqrt(M)
        scale = (cfg.spread * spread_mult)[:, None, None]
        ens_mean = (truth + bias_field + scale * mean_noise).astype(np.float32)
        truth_all[:, k] = truth
        fields[var] = ens_mean

        t_st = bw.apply(truth)  # (D, S)
        truth_station[:, :, k] = t_st
        # members at stations: correlated deviations re-centred on the mean-noise field
        xi = rn.standard_normal((D, M, S)) @ chol.T
        xi -= xi.mean(axis=1, keepdims=True)
        dev = xi + bw.apply(mean_noise)[:, None, :]
        members = (t_st + bw.apply(bias_field))[:, None, :] + (cfg.spread * spread_mult)[:, None, None] * dev
        predictors[:, :, 2 * k] = bw.apply(ens_mean.astype(float))
        predictors[:, :, 2 * k + 1] = members.std(axis=1, ddof=1)
        if k == 0:
            members_target = members.transpose(0, 2, 1)

    signal = np.einsum("dij,ij->d", truth_all[:, 0].astype(float), pattern)
    t_quad = truth_station[:, :, 1 if V > 1 else 0]
    ideal_mu = (
        truth_station[:, :, 0] + cfg.gamma * signal[:, None] + cfg.quad * (t_quad**2 - 1.0)
        + station_offset[None, :] - cfg.lapse * (altitude - orography)[None, :]
    )
    ideal_sigma = np.broadcast_to((cfg.obs_noise * spread_mult)[:, None], (D, S)).copy()
    ro = stream(seed, "synth.obs")
    obs = ideal_mu + ideal_sigma * ro.standard_normal((D, S))
    if cfg.missing_frac > 0:
        obs[ro.random((D, S)) < cfg.missing_frac] = np.nan

    pred_names = [f"{v}_{s}" for v in names for s in ("mean", "sd")]
    stations = StationTable(station_ids, lat, lon, altitude, orography)
    extras = dict(
        truth=truth_all, pattern=pattern, signal=signal, truth_station=truth_station,
        members=members_target, ideal_mu=ideal_mu, ideal_sigma=ideal_sigma,
        spread_mult=spread_mult, station_offset=station_offset, config=cfg.to_dict(),
    )
    return Dataset(grid, dates, stations, pred_names, round_sig(predictors), round_sig(obs), fields, extras)
