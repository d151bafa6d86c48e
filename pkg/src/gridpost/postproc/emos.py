"""Per-station EMOS: Gaussian predictive distribution with affine/softplus links.

``mu = a + b * mean`` and ``sigma = softplus(c + d * sd)``, fitted by
minimizing the mean CRPS with full-batch, diagonally preconditioned gradient
descent and an Armijo backtracking line search. All stations are optimized simultaneously but
independently (each has its own step size and stopping state).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, DimensionError
from ..numerics.ops import sigmoid, softplus, softplus_inv
from ..scoring import GaussianForecast, crps_gaussian, crps_gaussian_grad

MIN_SAMPLES = 30


@dataclass
class EmosParams:
    """Coefficients per station; arrays of shape (S,)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    station_ids: list = field(default_factory=list)
    train_crps: np.ndarray | None = None
    n_iter: np.ndarray | None = None

    def __post_init__(self):
        for k in ("a", "b", "c", "d"):
            setattr(self, k, np.atleast_1d(np.asarray(getattr(self, k), dtype=float)))
        if not (self.a.shape == self.b.shape == self.c.shape == self.d.shape):
            raise DimensionError("EMOS coefficient arrays must share a shape")

    def __len__(self):
        return len(self.a)

    def station(self, i):
        return float(self.a[i]), float(self.b[i]), float(self.c[i]), float(self.d[i])


@dataclass
class EmosTrace:
    """Per-iteration mean training CRPS of each station (NaN after convergence)."""

    loss: np.ndarray  # (iterations + 1, S)


def _loss_grad(theta, m, s, y, w, need_grad=True):
    # theta (S, 4) in standardized-predictor coordinates; m, s, y, w are (S, N)
    a, b, c, d = (theta[:, k:k + 1] for k in range(4))
    mu = a + b * m
    z = c + d * s
    sig = softplus(z)
    crps = crps_gaussian(mu, sig, y)
    n = w.sum(axis=1)
    loss = (np.where(w > 0, crps, 0.0)).sum(axis=1) / n
    if not need_grad:
        return loss, None
    gmu, gsig = crps_gaussian_grad(mu, sig, y)
    gmu = np.where(w > 0, gmu, 0.0)
    gz = np.where(w > 0, gsig * sigmoid(z), 0.0)
    grad = np.stack([gmu.sum(1), (gmu * m).sum(1), gz.sum(1), (gz * s).sum(1)], axis=1) / n[:, None]
    return loss, grad


def emos_fit(mean, sd, obs, station_ids=None, max_iter=1000, tol=1e-7, rtol=1e-13, armijo=1e-4,
             return_trace=False):
    """Fit EMOS coefficients for each station.

    Parameters
    ----------
    mean, sd, obs : array_like, shape (N, S) or (N,)
        Ensemble mean and standard deviation of the target variable and the
        verifying observation; NaN observations are ignored.
    max_iter : int
        Gradient-descent iterations per station.
    tol : float
        Stop a station once its gradient norm falls below ``tol``.
    rtol : float
        Also stop once an iteration improves the loss by less than this (relative).

    Returns
    -------
    EmosParams (and an ``EmosTrace`` if ``return_trace``)

    Notes
    -----
    Samples are sorted per station before fitting so the result does not
    depend on their order. Predictors are centred and scaled internally; if a
    station's ``sd`` has no variance, ``d`` is fixed at 0.
    """
    m = np.asarray(mean, dtype=float)
    s = np.asarray(sd, dtype=float)
    y = np.asarray(obs, dtype=float)
    if m.ndim == 1:
        m, s, y = m[:, None], s[:, None], y[:, None]
    if not (m.shape == s.shape == y.shape):
        raise DimensionError(f"mean {m.shape}, sd {s.shape} and obs {y.shape} must match")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
        raise DataError("EMOS predictors must be finite")
    ns = m.shape[1]
    ids = list(station_ids) if station_ids is not None else [str(i) for i in range(ns)]
    m, s, y = m.T.copy(), s.T.copy(), y.T.copy()  # (S, N)
    w = (~np.isnan(y)).astype(float)
    counts = w.sum(axis=1)
    if np.any(counts < MIN_SAMPLES):
        bad = ids[int(np.argmin(counts))]
        raise DataError(f"station {bad} has {int(counts.min())} training samples, need >= {MIN_SAMPLES}")
    # canonical sample order per station (missing last), for order invariance
    for i in range(ns):
        order = np.lexsort((s[i], m[i], np.nan_to_num(y[i], nan=np.inf)))
        m[i], s[i], y[i], w[i] = m[i, order], s[i, order], y[i, order], w[i, order]
    y = np.where(w > 0, y, 0.0)

    def moments(v):
        mu = (v * w).sum(1) / counts
        var = (((v - mu[:, None]) ** 2) * w).sum(1) / counts
        return mu, np.sqrt(var)

    m_mu, m_sd = moments(m)
    s_mu, s_sd = moments(s)
    m_sd = np.where(m_sd > 0, m_sd, 1.0)
    s_fixed = ~(s_sd > 1e-12 * np.maximum(1.0, np.abs(s_mu)))
    s_sd = np.where(s_fixed, 1.0, s_sd)
    ms = (m - m_mu[:, None]) / m_sd[:, None]
    ss = np.where(s_fixed[:, None], 0.0, (s - s_mu[:, None]) / s_sd[:, None])

    resid_mu, resid_sd = moments(y - m)
    theta = np.zeros((ns, 4))
    theta[:, 0] = m_mu  # a=0, b=1 written in centred coordinates
    theta[:, 1] = m_sd
    theta[:, 2] = softplus_inv(np.maximum(resid_sd, 1e-3))
    dmask = np.ones((ns, 4))
    dmask[s_fixed, 3] = 0.0
    # Diagonal preconditioner from the expected CRPS curvature of a calibrated
    # forecast: d2/dmu2 ~ 1/(sqrt(pi) sigma), d2/dsigma2 ~ 1/(2 sqrt(pi) sigma),
    # chained through the softplus link for c and d.
    sig0 = softplus(theta[:, 2])
    slope = sigmoid(theta[:, 2])
    precond = np.empty((ns, 4))
    precond[:, :2] = (np.sqrt(np.pi) * sig0)[:, None]
    precond[:, 2:] = (2.0 * np.sqrt(np.pi) * sig0 / slope**2)[:, None]
    precond *= dmask

    step = np.ones(ns)
    n_iter = np.zeros(ns, dtype=int)
    loss, grad = _loss_grad(theta, ms, ss, y, w)
    trace = [loss.copy()]
    active = np.flatnonzero(np.sqrt((grad**2 * dmask).sum(1)) > tol)
    for _ in range(max_iter):
        if active.size == 0:
            break
        sub = (ms[active], ss[active], y[active], w[active])
        th, g, lo, st = theta[active], grad[active], loss[active], step[active]
        direction = precond[active] * g
        decrease = (g * direction).sum(1)
        done = np.zeros(active.size, dtype=bool)
        new_loss = lo.copy()
        for _ in range(60):
            trial = th - st[:, None] * direction
            tl, _ = _loss_grad(trial, *sub, need_grad=False)
            ok = ~done & np.isfinite(tl) & (tl <= lo - armijo * st * decrease)
            th[ok] = trial[ok]
            new_loss[ok] = tl[ok]
            done |= ok
            if done.all():
                break
            st[~done] *= 0.5
        theta[active], step[active] = th, np.minimum(st * 2.0, 1e3)
        n_iter[active[done]] += 1
        loss[active], grad[active] = _loss_grad(th, *sub)
        row = np.full(ns, np.nan)
        row[active[done]] = loss[active[done]]
        trace.append(row)
        # stations whose line search failed have converged to working precision
        gn = np.sqrt((grad[active] ** 2 * dmask[active]).sum(1))
        rel = (lo - new_loss) <= rtol * np.abs(lo)
        active = active[done & (gn > tol) & ~rel]

    # back to raw predictor coordinates
    b = theta[:, 1] / m_sd
    a = theta[:, 0] - b * m_mu
    d = np.where(s_fixed, 0.0, theta[:, 3] / s_sd)
    c = theta[:, 2] - d * s_mu
    params = EmosParams(a, b, c, d, ids, loss, n_iter)
    if return_trace:
        return params, EmosTrace(np.array(trace))
    return params


def emos_predict(params: EmosParams, mean, sd) -> GaussianForecast:
    """Predictive N(mu, sigma^2); the last axis of ``mean``/``sd`` indexes stations."""
    m = np.asarray(mean, dtype=float)
    s = np.asarray(sd, dtype=float)
    if m.shape != s.shape:
        raise DimensionError(f"mean {m.shape} and sd {s.shape} differ")
    if m.ndim and m.shape[-1] != len(params) and len(params) != 1:
        raise DimensionError(f"last axis {m.shape[-1]} != number of stations {len(params)}")
    mu = params.a + params.b * m
    sigma = softplus(params.c + params.d * s)
    # softplus underflows only for hugely negative arguments; keep sigma strictly positive
    sigma = np.maximum(sigma, np.finfo(float).tiny)
    return GaussianForecast(mu, sigma)
