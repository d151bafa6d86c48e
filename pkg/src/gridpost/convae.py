"""Convolutional autoencoder for min-max normalized spatial fields.

Encoder: ``[conv -> relu -> maxpool] x 3 -> flatten -> dense relu -> dense h``.
Decoder mirrors it: ``dense relu -> dense relu -> reshape -> [tconv -> relu] x 3
-> conv 1 filter sigmoid``. With the default geometry an 81x81 field shrinks
81 -> 27 -> 9 -> 3 in the encoder and the 9x9 / stride-3 / pad-3 transposed
convolutions rebuild 3 -> 9 -> 27 -> 81.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, NumericError, TrainingError
from .numerics import AdamState, LayerSpec, Sequential, adam_step, mse_loss
from .rng import stream

_RANGE_TOL = 1e-6


@dataclass
class ConvAeConfig:
    latent_dim: int = 2
    input_shape: tuple = (81, 81)
    enc_filters: tuple = (16, 8, 4)
    conv_kernel: int = 3
    conv_padding: int = 1
    pool_window: int = 3
    pool_stride: int = 3
    bridge_width: int = 64
    dec_filters: tuple = (4, 8, 16)
    dec_kernel: int = 9
    dec_stride: int | None = None  # follows pool_stride when unset
    dec_padding: int = 3
    out_kernel: int = 3
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.enc_filters = tuple(self.enc_filters)
        self.dec_filters = tuple(self.dec_filters)

    def validate(self):
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if len(self.enc_filters) != len(self.dec_filters) or not self.enc_filters:
            raise ConfigError("encoder and decoder need the same (non-zero) number of stages")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.pool_stride < 1 or self.pool_window < 1:
            raise ConfigError("pool window and stride must be >= 1")

    @property
    def decoder_stride(self) -> int:
        return self.pool_stride if self.dec_stride is None else self.dec_stride

    def deviations(self):
        """Settings that differ from the literal published description."""
        out = [
            "pool_stride=%d (published value 1; stride equal to the window gives a compact "
            "bottleneck)" % self.pool_stride if self.pool_stride != 1 else
            "pool_stride=1 (literal published value; large flatten layer)",
            "symmetric dense bridge of width %d on both encoder and decoder side" % self.bridge_width,
            "decoder tconv stride %d, padding %d (unpublished)" % (self.decoder_stride, self.dec_padding),
            "restore-best-weights on early stop",
        ]
        return out

    def to_dict(self):
        return asdict(self)


def encoder_specs(cfg: ConvAeConfig):
    k, p = cfg.conv_kernel, cfg.conv_padding
    specs = []
    for f in cfg.enc_filters:
        specs += [
            LayerSpec("conv2d", f, (k, k), (1, 1), (p, p)),
            LayerSpec("activation", activation="relu"),
            LayerSpec("maxpool2d", kernel=(cfg.pool_window,) * 2, stride=(cfg.pool_stride,) * 2),
        ]
    specs += [
        LayerSpec("flatten"),
        LayerSpec("dense", cfg.bridge_width),
        LayerSpec("activation", activation="relu"),
        LayerSpec("dense", cfg.latent_dim),
    ]
    return specs


def decoder_specs(cfg: ConvAeConfig, bottleneck_shape):
    c, hh, ww = bottleneck_shape
    k, s, p = cfg.dec_kernel, cfg.decoder_stride, cfg.dec_padding
    specs = [
        LayerSpec("dense", cfg.bridge_width),
        LayerSpec("activation", activation="relu"),
        LayerSpec("dense", c * hh * ww),
        LayerSpec("activation", activation="relu"),
        LayerSpec("reshape", shape=(c, hh, ww)),
    ]
    for f in cfg.dec_filters:
        specs += [
            LayerSpec("tconv2d", f, (k, k), (s, s), (p, p)),
            LayerSpec("activation", activation="relu"),
        ]
    o = cfg.out_kernel
    specs += [
        LayerSpec("conv2d", 1, (o, o), (1, 1), (o // 2, o // 2)),
        LayerSpec("activation", activation="sigmoid"),
    ]
    return specs


class ConvAeModel:
    """Encoder and decoder networks plus config and training history."""

    def __init__(self, config: ConvAeConfig, encoder: Sequential, decoder: Sequential,
                 bottleneck_shape: tuple):
        self.config = config
        self.bottleneck_shape = tuple(bottleneck_shape)
        self.encoder = encoder
        self.decoder = decoder
        self.history: list[tuple[int, float, float]] = []
        self.best_epoch: int | None = None

    @property
    def latent_dim(self):
        return self.config.latent_dim

    @property
    def flatten_size(self):
        return int(np.prod(self.bottleneck_shape))

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def gradients(self):
        return self.encoder.gradients() + self.decoder.gradients()

    def param_names(self):
        return ["encoder." + n for n in self.encoder.param_names()] + [
            "decoder." + n for n in self.decoder.param_names()
        ]

    def n_parameters(self):
        return self.encoder.n_parameters() + self.decoder.n_parameters()

    def astype(self, dtype):
        self.encoder.astype(dtype)
        self.decoder.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.encoder.parameters()[0].dtype

    def get_weights(self):
        return [p.copy() for p in self.parameters()]

    def set_weights(self, weights):
        params = self.parameters()
        if len(weights) != len(params):
            raise DimensionError(f"expected {len(params)} arrays, got {len(weights)}")
        for p, w in zip(params, weights):
            if p.shape != w.shape:
                raise DimensionError(f"weight shape {w.shape} != parameter shape {p.shape}")
            p[...] = w

    def metadata(self):
        return {
            "config": self.config.to_dict(),
            "deviations": self.config.deviations(),
            "n_parameters": self.n_parameters(),
            "flatten_size": self.flatten_size,
            "best_epoch": self.best_epoch,
            "history": [list(r) for r in self.history],
        }

    # forward passes -------------------------------------------------------

    def _prepare(self, fields01):
        x = np.asarray(fields01)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim == 4 and x.shape[1] == 1:
            x = x[:, 0]
        if x.ndim != 3 or x.shape[1:] != tuple(self.config.input_shape):
            raise DimensionError(
                f"expected fields of shape {self.config.input_shape}, got {np.shape(fields01)}"
            )
        if x.size and (not np.all(np.isfinite(x)) or x.min() < -_RANGE_TOL or x.max() > 1 + _RANGE_TOL):
            raise DomainError("input fields must be finite and min-max normalized to [0, 1]")
        return x[:, None].astype(self.dtype, copy=False), single

    def encode(self, fields01, batch_size=256):
        """Latent codes ``(N, h)`` (or ``(h,)`` for a single field)."""
        x, single = self._prepare(fields01)
        out = np.concatenate([
            self.encoder.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)
        ]) if len(x) else np.empty((0, self.latent_dim), dtype=self.dtype)
        return out[0] if single else out

    def decode(self, codes, batch_size=256):
        """Reconstructed fields ``(N, H, W)`` with values in (0, 1)."""
        c = np.asarray(codes, dtype=self.dtype)
        single = c.ndim == 1
        c = np.atleast_2d(c)
        if c.shape[-1] != self.latent_dim:
            raise DimensionError(f"code length {c.shape[-1]} != h={self.latent_dim}")
        out = np.concatenate([
            self.decoder.forward(c[i:i + batch_size])[:, 0] for i in range(0, len(c), batch_size)
        ])
        return out[0] if single else out

    def reconstruct(self, fields01, batch_size=256):
        return self.decode(self.encode(fields01, batch_size), batch_size)


def build(config: ConvAeConfig, rng=None) -> ConvAeModel:
    """Assemble an untrained model; geometry errors name the failing layer."""
    config.validate()
    if config.pool_stride == 1:
        warnings.warn(
            "pool_stride=1 performs no downsampling; the flatten layer becomes very large",
            stacklevel=2,
        )
    rng = stream(config.seed, "convae.init") if rng is None else rng
    dtype = np.dtype(config.dtype)
    in_shape = (1,) + tuple(config.input_shape)
    enc = Sequential.from_specs(encoder_specs(config), in_shape, rng, dtype)
    shapes = [in_shape]
    for layer in enc.layers:
        shapes.append(layer.output_shape(shapes[-1]))
    flat_idx = next(i for i, l in enumerate(enc.layers) if type(l).__name__ == "Flatten")
    bottleneck = shapes[flat_idx]
    try:
        dec = Sequential.from_specs(decoder_specs(config, bottleneck), (config.latent_dim,), rng, dtype)
    except (ConfigError, DimensionError) as exc:
        raise ConfigError(f"decoder: {exc}") from exc
    if dec.out_shape != in_shape:
        _raise_geometry(dec, shapes, in_shape, config.latent_dim)
    return ConvAeModel(config, enc, dec, bottleneck)


def _raise_geometry(dec, enc_shapes, in_shape, h):
    # the k-th transposed conv should rebuild the input of the k-th pooling stage from the end
    targets = [s for s, n in zip(enc_shapes, enc_shapes[1:]) if len(n) == 3 and n[1:] != s[1:]]
    shape, k = (h,), 0
    for i, layer in enumerate(dec.layers):
        shape = layer.output_shape(shape)
        if type(layer).__name__ == "ConvTranspose2D":
            k += 1
            want = targets[-k][1:] if k <= len(targets) else None
            if want is not None and shape[1:] != want:
                raise ConfigError(
                    f"decoder layer {i} (tconv2d) yields {shape[1:]}, expected {want}; "
                    f"decoder output {dec.out_shape} != input {in_shape}"
                )
    raise ConfigError(f"decoder output {dec.out_shape} != input {in_shape}")


def constant_mean_mse(fields01, reference=None) -> float:
    """MSE of predicting every field by the (pointwise) mean field of ``reference``."""
    x = np.asarray(fields01, dtype=float)
    ref = x if reference is None else np.asarray(reference, dtype=float)
    return float(np.mean((x - ref.mean(axis=0)) ** 2))


def reconstruction_mse(model: ConvAeModel, fields01, batch_size=256) -> float:
    """Grid-point MSE between fields and their reconstructions (0-1 scale)."""
    x, _ = model._prepare(fields01)
    total, count = 0.0, 0
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        rec = model.decoder.forward(model.encoder.forward(xb))
        total += float(np.sum((rec.astype(float) - xb) ** 2))
        count += xb.size
    return total / count


def _train_step(model, xb):
    model.encoder.zero_grad()
    model.decoder.zero_grad()
    code = model.encoder.forward(xb)
    rec = model.decoder.forward(code)
    loss, drec = mse_loss(rec, xb)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    dcode = model.decoder.backward(drec.astype(rec.dtype, copy=False))
    model.encoder.backward(dcode)
    return loss


def train(model: ConvAeModel, fields01_train, fields01_val, history_path=None, verbose=False):
    """Fit with Adam on grid-point MSE, early stopping on validation MSE.

    Returns the model (trained in place) with ``history`` rows
    ``(epoch, train_mse, val_mse)`` and the weights of the best validation
    epoch restored. ``train_mse`` is the batch-size weighted mean of the
    mini-batch losses seen during the epoch.
    """
    cfg = model.config
    xt, _ = model._prepare(fields01_train)
    xv, _ = model._prepare(fields01_val)
    if len(xt) == 0 or len(xv) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    params = model.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    best, best_w, wait = np.inf, model.get_weights(), 0
    model.history, model.best_epoch = [], None
    for epoch in range(1, cfg.max_epochs + 1):
        order = stream(cfg.seed, "convae.shuffle", epoch).permutation(len(xt))
        total = 0.0
        for b, start in enumerate(range(0, len(xt), cfg.batch_size)):
            xb = xt[order[start:start + cfg.batch_size]]
            try:
                loss = _train_step(model, xb)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            adam_step(params, model.gradients(), state)
            total += loss * len(xb)
        train_mse = total / len(xt)
        val_mse = reconstruction_mse(model, xv)
        model.history.append((epoch, train_mse, val_mse))
        if verbose:
            print(f"epoch {epoch:3d}  train {train_mse:.6f}  val {val_mse:.6f}")
        if val_mse < best:
            best, best_w, wait, model.best_epoch = val_mse, model.get_weights(), 0, epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.set_weights(best_w)
    if history_path is not None:
        write_history(history_path, model.history)
    return model


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, tr, va in history:
            w.writerow([epoch, f"{tr:.9g}", f"{va:.9g}"])


def encode(model: ConvAeModel, field01):
    return model.encode(field01)


def decode(model: ConvAeModel, code):
    return model.decode(code)
