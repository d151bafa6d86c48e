"""Proper scoring rules, skill scores and the Diebold-Mariano test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erfc

from .errors import DimensionError, DomainError

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=float) / math.sqrt(2.0))


def norm_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass(frozen=True)
class GaussianForecast:
    """Predictive normal distributions; ``mu`` and ``sigma`` are scalars or aligned arrays."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != sigma.shape:
            raise DimensionError(f"mu {mu.shape} and sigma {sigma.shape} differ in shape")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise DomainError("forecast parameters must be finite")
        if np.any(sigma <= 0):
            raise DomainError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def __len__(self):
        return int(self.mu.size)

    def crps(self, y):
        return crps_gaussian(self.mu, self.sigma, y)


@dataclass(frozen=True)
class ScoreSeries:
    """Per-date scores of one model at one station (or pooled)."""

    values: np.ndarray
    station_id: str = ""
    model_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("scores must be finite and non-negative")
        object.__setattr__(self, "values", v)


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise DomainError("sigma must be strictly positive")
    return sigma


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2) at observation ``y``; broadcasts."""
    sigma = _check_sigma(sigma)
    z = (np.asarray(y, dtype=float) - mu) / sigma
    return sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - _INV_SQRT_PI)


def crps_gaussian_grad(mu, sigma, y):
    """``(dCRPS/dmu, dCRPS/dsigma)`` of the closed form."""
    sigma = _check_sigma(sigma)
    z = (np.asarray(y, dtype=float) - mu) / sigma
    return -(2.0 * norm_cdf(z) - 1.0), 2.0 * norm_pdf(z) - _INV_SQRT_PI


def crps_ensemble(members, y):
    """CRPS of the empirical distribution of ``members`` (last axis) at ``y``.

    Uses ``E|X - y| - E|X - X'| / 2`` with the pairwise term from sorted members.
    """
    x = np.asarray(members, dtype=float)
    if x.shape[-1] < 1 or x.size == 0:
        raise DomainError("ensemble must have at least one member")
    m = x.shape[-1]
    y = np.asarray(y, dtype=float)
    abs_err = np.mean(np.abs(x - y[..., None]), axis=-1)
    xs = np.sort(x, axis=-1)
    w = 2.0 * np.arange(m) - m + 1.0
    spread = 2.0 * np.sum(xs * w, axis=-1) / (m * m)
    return abs_err - 0.5 * spread


def crps_numeric(cdf: Callable, y: float, lo: float, hi: float, n: int = 20001, breakpoints=()):
    """Composite-Simpson evaluation of the CRPS integral over ``[lo, hi]``.

    The integrand jumps at ``y``; it is split there, and at any extra
    ``breakpoints`` (jump locations of a step cdf), so that every piece is
    smooth. ``cdf`` must be vectorized and right-continuous; at the right end
    of a piece it is evaluated just below the breakpoint to take the left limit.
    Mass outside ``[lo, hi]`` is ignored.
    """
    if not lo < hi:
        raise DomainError(f"need lo < hi, got [{lo}, {hi}]")
    cuts = sorted({float(lo), float(hi)} | {float(b) for b in (y, *breakpoints) if lo < b < hi})
    total = 0.0
    span = hi - lo
    for a, b in zip(cuts[:-1], cuts[1:]):
        k = max(2, int(round((n - 1) * (b - a) / span)))
        k += k % 2
        z = np.linspace(a, b, k + 1)
        z[-1] = np.nextafter(b, -np.inf)
        ind = 1.0 if a >= y else 0.0
        g = (np.asarray(cdf(z), dtype=float) - ind) ** 2
        h = (b - a) / k
        total += h / 3.0 * (g[0] + g[-1] + 4.0 * g[1:-1:2].sum() + 2.0 * g[2:-1:2].sum())
    return total


def crpss(score, reference):
    """Skill ``1 - score / reference``; positive means better than the reference."""
    reference = np.asarray(reference, dtype=float)
    if np.any(reference <= 0):
        raise DomainError("reference score must be positive")
    return 1.0 - np.asarray(score, dtype=float) / reference


class DMResult(NamedTuple):
    statistic: float
    p_value: float


def newey_west_variance(d, lag: int) -> float:
    """Bartlett-kernel long-run variance of ``d`` (1/n autocovariances)."""
    d = np.asarray(d, dtype=float)
    n = d.size
    e = d - d.mean()
    var = e @ e / n
    for k in range(1, lag + 1):
        var += 2.0 * (1.0 - k / (lag + 1.0)) * (e[k:] @ e[:-k]) / n
    return float(var)


def dm_test(loss_a, loss_b, lag: int | None = None) -> DMResult:
    """Two-sided Diebold-Mariano test of equal expected loss.

    Positive statistic means ``loss_a`` is larger, i.e. model b is better.
    The long-run variance uses a Newey-West estimator with lag
    ``floor(n ** (1/3))`` unless given; the p-value is from the standard normal.
    """
    a = np.asarray(getattr(loss_a, "values", loss_a), dtype=float)
    b = np.asarray(getattr(loss_b, "values", loss_b), dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"loss series must be 1-D and paired, got {a.shape} and {b.shape}")
    n = a.size
    if n < 10:
        raise DomainError(f"Diebold-Mariano test needs n >= 10 paired values, got {n}")
    d = a - b
    if not np.any(d):
        return DMResult(0.0, 1.0)
    if lag is None:
        lag = int(math.floor(n ** (1.0 / 3.0) + 1e-9))
    var = newey_west_variance(d, lag)
    mean = float(d.mean())
    if var <= 0:
        return DMResult(math.copysign(math.inf, mean), 0.0)
    stat = mean / math.sqrt(var / n)
    p = float(erfc(abs(stat) / math.sqrt(2.0)))
    return DMResult(stat, p)
