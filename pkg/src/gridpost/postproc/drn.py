"""Distributional regression network with station embeddings.

One network is fitted jointly for all stations. Its input is the standardized
feature vector concatenated with a learned per-station embedding; two ReLU
hidden layers produce ``(raw_mu, raw_sigma)``. In standardized target units
``mu' = raw_mu`` and ``sigma' = softplus(raw_sigma)``; outputs are mapped back
with the training mean/sd of the observations. The loss is the mean CRPS.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import BundleError, ConfigError, DataError, NumericError, TrainingError
from ..numerics import AdamState, Embedding, LayerSpec, Sequential, adam_step
from ..numerics.ops import sigmoid, softplus
from ..rng import stream
from ..scoring import GaussianForecast, crps_gaussian, crps_gaussian_grad
from .features import SPATIAL_MODES, FeatureLayout, FeatureMatrix

THREADS_ENV = "GRIDPOST_THREADS"


@dataclass
class DrnConfig:
    hidden: tuple = (100, 100)
    embedding_dim: int = 15
    spatial_mode: str = "none"
    spatial_vars: tuple = ()
    latent_dim: int = 0
    lr: float = 0.002
    batch_size: int = 1024
    max_epochs: int = 100
    patience: int = 10
    repetitions: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.spatial_vars = tuple(self.spatial_vars)

    def validate(self):
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.spatial_mode not in SPATIAL_MODES:
            raise ConfigError(f"spatial_mode must be one of {SPATIAL_MODES}")
        if (self.spatial_mode == "none") != (not self.spatial_vars):
            raise ConfigError("spatial variables are required iff spatial_mode != 'none'")
        if self.spatial_mode != "none" and self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1 with spatial inputs")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1 or self.lr <= 0:
            raise ConfigError("batch_size, max_epochs, patience and lr must be positive")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden layer widths must be >= 1")

    def to_dict(self):
        return asdict(self)

    def architecture(self):
        """Everything that defines the training procedure apart from the input width."""
        d = self.to_dict()
        for k in ("spatial_mode", "spatial_vars", "latent_dim", "seed"):
            d.pop(k)
        return d

    @staticmethod
    def deviations():
        return [
            "sigma = softplus(raw) instead of an unconstrained output",
            "targets standardized by training mean/sd; outputs de-standardized",
            "batch size 1024 (unpublished)",
            "restore-best-weights on early stop",
        ]


class DrnModel:
    """One trained network (one repetition)."""

    def __init__(self, config: DrnConfig, layout: FeatureLayout, y_mean: float, y_sd: float,
                 repetition: int = 0, rng=None):
        config.validate()
        self.config = config
        self.layout = layout
        self.y_mean = float(y_mean)
        self.y_sd = float(y_sd)
        self.repetition = repetition
        rng = stream(config.seed + repetition, "drn.init") if rng is None else rng
        dtype = np.dtype(config.dtype)
        self.embedding = Embedding(len(layout.station_ids), config.embedding_dim, rng, dtype)
        specs = []
        for width in config.hidden:
            specs += [LayerSpec("dense", width), LayerSpec("activation", activation="relu")]
        specs.append(LayerSpec("dense", 2))
        self.net = Sequential.from_specs(specs, (layout.width + config.embedding_dim,), rng, dtype)
        self.history: list[tuple[int, float, float]] = []
        self.best_epoch: int | None = None

    @property
    def dtype(self):
        return self.embedding.params["E"].dtype

    def parameters(self):
        return [self.embedding.params["E"]] + self.net.parameters()

    def gradients(self):
        return [self.embedding.grads["E"]] + self.net.gradients()

    def param_names(self):
        return ["embedding.E"] + ["net." + n for n in self.net.param_names()]

    def get_weights(self):
        return [p.copy() for p in self.parameters()]

    def set_weights(self, weights):
        for p, w in zip(self.parameters(), weights, strict=True):
            if p.shape != w.shape:
                raise BundleError(f"weight shape {w.shape} != parameter shape {p.shape}")
            p[...] = w

    def _raw(self, x, station):
        z = np.concatenate([x.astype(self.dtype, copy=False), self.embedding.forward(station)], axis=1)
        return self.net.forward(z)

    def predict_std(self, x, station, batch_size=65536):
        """``(mu', sigma')`` in standardized target units."""
        mus, sigs = [], []
        for i in range(0, len(x), batch_size):
            raw = self._raw(x[i:i + batch_size], station[i:i + batch_size]).astype(float)
            mus.append(raw[:, 0])
            sigs.append(softplus(raw[:, 1]))
        if not mus:
            return np.empty(0), np.empty(0)
        return np.concatenate(mus), np.concatenate(sigs)

    def predict(self, fm: FeatureMatrix) -> GaussianForecast:
        mu, sig = self.predict_std(fm.x, fm.station)
        sig = np.maximum(sig, np.finfo(float).tiny)
        return GaussianForecast(self.y_mean + self.y_sd * mu, self.y_sd * sig)

    def loss_and_grad(self, x, station, y_std):
        """Mean CRPS (standardized units) of a batch; fills parameter gradients."""
        self.embedding.zero_grad()
        self.net.zero_grad()
        raw = self._raw(x, station)
        mu = raw[:, 0].astype(float)
        z = raw[:, 1].astype(float)
        sig = np.maximum(softplus(z), 1e-12)
        loss = float(np.mean(crps_gaussian(mu, sig, y_std)))
        if not np.isfinite(loss):
            raise NumericError("non-finite CRPS loss")
        gmu, gsig = crps_gaussian_grad(mu, sig, y_std)
        n = len(y_std)
        draw = np.stack([gmu / n, gsig * sigmoid(z) / n], axis=1).astype(raw.dtype)
        dz = self.net.backward(draw)
        self.embedding.backward(dz[:, self.layout.width:])
        return loss

    def metadata(self):
        return {
            "config": self.config.to_dict(),
            "architecture": self.config.architecture(),
            "deviations": self.config.deviations(),
            "layout": self.layout.to_dict(),
            "y_mean": self.y_mean,
            "y_sd": self.y_sd,
            "repetition": self.repetition,
            "best_epoch": self.best_epoch,
            "history": [list(r) for r in self.history],
        }


def _mean_crps_std(model, fm, y_mean, y_sd):
    mu, sig = model.predict_std(fm.x, fm.station)
    return float(np.mean(crps_gaussian(mu, np.maximum(sig, 1e-12), (fm.y - y_mean) / y_sd)))


def train_one(config: DrnConfig, layout: FeatureLayout, train: FeatureMatrix, val: FeatureMatrix,
              repetition: int = 0, verbose=False) -> DrnModel:
    """Train a single repetition with seed ``config.seed + repetition``."""
    y_mean = float(np.mean(train.y))
    y_sd = float(np.std(train.y)) or 1.0
    model = DrnModel(config, layout, y_mean, y_sd, repetition)
    known = set(np.unique(train.station).tolist())
    unseen = sorted(set(np.unique(val.station).tolist()) - known)
    if unseen:
        ids = [layout.station_ids[i] for i in unseen]
        raise DataError(f"validation stations absent from training: {', '.join(ids)}")
    y_std = (train.y - y_mean) / y_sd
    params = model.parameters()
    state = AdamState.for_params(params, lr=config.lr)
    best, best_w, wait = np.inf, model.get_weights(), 0
    seed = config.seed + repetition
    for epoch in range(1, config.max_epochs + 1):
        order = stream(seed, "drn.shuffle", epoch).permutation(len(train))
        total = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                loss = model.loss_and_grad(train.x[idx], train.station[idx], y_std[idx])
            except NumericError as exc:
                raise TrainingError(f"repetition {repetition}, epoch {epoch}, batch {b}: {exc}") from exc
            adam_step(params, model.gradients(), state)
            total += loss * len(idx)
        val_crps = _mean_crps_std(model, val, y_mean, y_sd)
        model.history.append((epoch, total / len(train) * y_sd, val_crps * y_sd))
        if verbose:
            print(f"rep {repetition} epoch {epoch:3d} train {total / len(train) * y_sd:.5f} val {val_crps * y_sd:.5f}")
        if val_crps < best:
            best, best_w, wait, model.best_epoch = val_crps, model.get_weights(), 0, epoch
        else:
            wait += 1
            if wait >= config.patience:
                break
    model.set_weights(best_w)
    return model


def worker_count(requested: int) -> int:
    """Threads for ``requested`` independent jobs, capped by ``GRIDPOST_THREADS``."""
    cap = os.environ.get(THREADS_ENV)
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from exc
    return max(1, min(requested, limit))


def drn_train(config: DrnConfig, layout: FeatureLayout, train: FeatureMatrix, val: FeatureMatrix,
              verbose=False) -> list[DrnModel]:
    """Train ``config.repetitions`` networks (repetition k seeded with ``seed + k``).

    Repetitions are independent, so they run on a thread pool; each one is
    deterministic regardless of scheduling.
    """
    config.validate()
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation sets must contain observed samples")
    n = worker_count(config.repetitions)
    if n == 1:
        return [train_one(config, layout, train, val, k, verbose) for k in range(config.repetitions)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(train_one, config, layout, train, val, k, verbose)
                   for k in range(config.repetitions)]
        return [f.result() for f in futures]


def drn_predict_aggregate(models, fm: FeatureMatrix) -> GaussianForecast:
    """Average ``mu`` and ``sigma`` over the repetitions."""
    models = list(models)
    if not models:
        raise ConfigError("need at least one model to aggregate")
    ref = models[0]
    for m in models[1:]:
        if not m.layout.same_structure(ref.layout) or m.config.architecture() != ref.config.architecture():
            raise BundleError("models to aggregate have different feature layouts or architectures")
    fc = [m.predict(fm) for m in models]
    mu = np.mean([f.mu for f in fc], axis=0)
    sigma = np.mean([f.sigma for f in fc], axis=0)
    return GaussianForecast(mu, sigma)


def aggregate_forecasts(forecasts) -> GaussianForecast:
    """Parameter averaging of already computed forecasts."""
    fc = list(forecasts)
    if not fc:
        raise ConfigError("need at least one forecast")
    return GaussianForecast(np.mean([f.mu for f in fc], axis=0), np.mean([f.sigma for f in fc], axis=0))
