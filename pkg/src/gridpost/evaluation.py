"""Experiment-level verification: CRPS tables, station skill with significance,
permutation importance, reconstruction curves and the embedding sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, EvaluationError
from .rng import stream
from .scoring import crps_gaussian, dm_test

ALPHA = 0.05


class MeanCrps(NamedTuple):
    value: float
    n_valid: int
    n_skipped: int


def crps_matrix(mu, sigma, obs):
    """Elementwise CRPS with NaN where the observation is missing."""
    mu, sigma, obs = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float),
                                         np.asarray(obs, dtype=float))
    out = np.full(obs.shape, np.nan)
    ok = ~np.isnan(obs)
    out[ok] = crps_gaussian(mu[ok], sigma[ok], obs[ok])
    return out


def mean_crps(forecast, obs, return_counts=False):
    """Mean CRPS over all pairs with an observation; missing ones are skipped.

    ``forecast`` is a ``GaussianForecast`` (or any object with ``mu``/``sigma``)
    aligned with ``obs``.
    """
    scores = crps_matrix(forecast.mu, forecast.sigma, obs)
    valid = ~np.isnan(scores)
    n = int(valid.sum())
    if n == 0:
        raise EvaluationError("no valid forecast/observation pairs")
    res = MeanCrps(float(scores[valid].mean()), n, int(scores.size - n))
    return res if return_counts else res.value


def _check_pairing(a, b, dates):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise EvaluationError(f"score arrays differ in shape: {a.shape} vs {b.shape}")
    bad = np.isnan(a) != np.isnan(b)
    if bad.any():
        rows = np.flatnonzero(bad.any(axis=tuple(range(1, a.ndim))))
        listed = [str(dates[i]) if dates is not None else str(i) for i in rows[:10]]
        more = "" if len(rows) <= 10 else f" (+{len(rows) - 10} more)"
        raise EvaluationError(f"unpaired scores on dates: {', '.join(listed)}{more}")
    return a, b


@dataclass
class StationSkill:
    station_id: str
    n: int
    crps: float
    crps_ref: float
    crpss: float
    dm_stat: float
    p_value: float

    @property
    def significant(self):
        return self.p_value < ALPHA


def station_crpss(scores, ref_scores, station_ids, dates=None):
    """Per-station CRPSS of ``scores`` against ``ref_scores`` plus a DM test.

    Both inputs are ``(D, S)`` CRPS arrays on identical (date, station)
    pairs. The DM statistic is computed on ``ref - model`` so that a positive
    value means the model is better, matching the sign of the skill score.
    """
    a, b = _check_pairing(scores, ref_scores, dates)
    out = []
    for s, sid in enumerate(station_ids):
        ok = ~np.isnan(a[:, s])
        ma, mb = float(a[ok, s].mean()), float(b[ok, s].mean())
        if ok.sum() >= 10:
            stat, p = dm_test(b[ok, s], a[ok, s])
        else:
            stat, p = float("nan"), float("nan")
        skill = 1.0 - ma / mb if mb > 0 else (0.0 if ma == mb else float("-inf"))
        out.append(StationSkill(str(sid), int(ok.sum()), ma, mb, skill, float(stat), float(p)))
    return out


def pooled_dm(scores, ref_scores, dates=None):
    """DM test on the per-date mean over stations (positive: model better)."""
    a, b = _check_pairing(scores, ref_scores, dates)
    keep = ~np.all(np.isnan(a), axis=1)
    return dm_test(np.nanmean(b[keep], axis=1), np.nanmean(a[keep], axis=1))


def fraction_improved(skills):
    return float(np.mean([s.crpss > 0 for s in skills]))


# ------------------------------------------------------------------ importance


@dataclass
class Importance:
    feature: str
    mean_delta: float
    sd_delta: float
    n_models: int
    deltas: tuple


def _mean_crps_model(model, fm):
    f = model.predict(fm)
    return float(np.mean(crps_gaussian(f.mu, f.sigma, fm.y)))


def permutation_importance(models, fm, layout, seed=0, features=None, n_repeats=None,
                           permutation=None):
    """CRPS increase when one feature group is shuffled across the test set.

    Parameters
    ----------
    models : sequence of DrnModel
        Repetitions; the first ``n_repeats`` are evaluated separately and the
        spread of the deltas over them is reported.
    fm : FeatureMatrix
        Observed test samples.
    layout : FeatureLayout
    features : list of str, optional
        Subset of group names (default: every predictor, metadata column,
        latent-code block and ``station_embedding``).
    permutation : ndarray, optional
        Row permutation to use for every feature instead of seeded ones.
    """
    models = list(models)[: n_repeats or None]
    if not models:
        raise ConfigError("need at least one model")
    groups = dict(layout.groups())
    groups["station_embedding"] = None
    names = list(groups) if features is None else list(features)
    unknown = [n for n in names if n not in groups]
    if unknown:
        raise ConfigError(f"unknown feature(s): {', '.join(unknown)}; known: {', '.join(groups)}")
    base = [_mean_crps_model(m, fm) for m in models]
    out = []
    order = list(groups)
    for name in names:
        if permutation is not None:
            perm = np.asarray(permutation)
        else:
            perm = stream(seed, "importance", order.index(name)).permutation(len(fm))
        if groups[name] is None:
            pfm = replace(fm, station=fm.station[perm])
        else:
            x = fm.x.copy()
            cols = groups[name]
            x[:, cols] = fm.x[perm][:, cols]
            pfm = replace(fm, x=x)
        deltas = tuple(_mean_crps_model(m, pfm) - b for m, b in zip(models, base))
        sd = float(np.std(deltas, ddof=1)) if len(deltas) > 1 else 0.0
        out.append(Importance(name, float(np.mean(deltas)), sd, len(deltas), deltas))
    return out


# ------------------------------------------------------- reconstruction curves


@dataclass
class ReconRow:
    h: int
    method: str
    split: str
    mse: float


def recon_curve(models, splits, h_list, methods=("convae", "pca")):
    """Grid-point MSE per (h, method, split).

    ``models`` maps ``(method, h)`` to a fitted ``ConvAeModel`` or ``PcaModel``;
    ``splits`` maps split name (``train``/``test``) to normalized fields.
    """
    from . import convae, pca

    rows = []
    for method in methods:
        for h in h_list:
            if (method, h) not in models:
                raise ConfigError(f"no {method} model for h={h}")
            m = models[(method, h)]
            for split, x in splits.items():
                if method == "convae":
                    mse = convae.reconstruction_mse(m, x)
                else:
                    mse = pca.reconstruction_mse(m, np.asarray(x).reshape(len(x), -1))
                rows.append(ReconRow(int(h), method, split, float(mse)))
    return rows


# -------------------------------------------------------------- embedding sweep


@dataclass
class SweepRow:
    embed_dim: int
    spatial_mode: str
    mean_crps: float


def embed_sweep(config, dims, layout, train, val, test, verbose=False):
    """Train DRN variants over embedding dimensions and score them on ``test``."""
    from .postproc.drn import drn_predict_aggregate, drn_train

    rows = []
    for e in dims:
        cfg = replace(config, embedding_dim=int(e))
        models = drn_train(cfg, layout, train, val, verbose=verbose)
        f = drn_predict_aggregate(models, test)
        rows.append(SweepRow(int(e), cfg.spatial_mode, float(np.mean(crps_gaussian(f.mu, f.sigma, test.y)))))
    return rows


# ----------------------------------------------------------------------- CSV


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def write_forecasts(path, dates, station_ids, mu, sigma, obs=None):
    """``date,station_id,mu,sigma`` rows for a ``(D, S)`` grid of forecasts."""
    header = ["date", "station_id", "mu", "sigma"]
    rows = []
    for t, d in enumerate(dates):
        for s, sid in enumerate(station_ids):
            rows.append((d, sid, float(mu[t, s]), float(sigma[t, s])))
    write_csv(path, header, rows)


def write_station_skill(path, skills):
    write_csv(path, ["station_id", "n", "crps", "crps_ref", "crpss", "dm_stat", "p_value", "significant"],
              [(s.station_id, s.n, s.crps, s.crps_ref, s.crpss, s.dm_stat, s.p_value, s.significant)
               for s in skills])


def write_importance(path, rows):
    write_csv(path, ["feature", "mean_delta_crps", "sd_delta_crps", "n_models"],
              [(r.feature, r.mean_delta, r.sd_delta, r.n_models) for r in rows])


def write_recon_curve(path, rows):
    write_csv(path, ["h", "method", "split", "mse"], [(r.h, r.method, r.split, r.mse) for r in rows])


def write_sweep(path, rows):
    write_csv(path, ["embed_dim", "spatial_mode", "mean_crps"],
              [(r.embed_dim, r.spatial_mode, r.mean_crps) for r in rows])
