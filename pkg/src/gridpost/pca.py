"""Principal component analysis of flattened, min-max normalized fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass
class PcaModel:
    """Linear encoder/decoder.

    Attributes
    ----------
    mean : ndarray, shape (n_features,)
    components : ndarray, shape (h, n_features)
        Orthonormal rows in descending eigenvalue order.
    eigenvalues : ndarray, shape (h,)
        Variances along each component (``s**2 / N``).
    tail_variance : float
        Sum of the eigenvalues not kept, so the training reconstruction MSE
        is ``tail_variance / n_features``.
    field_shape : tuple, optional
        Original 2-D shape when fitted on fields.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    tail_variance: float = 0.0
    field_shape: tuple = ()

    @property
    def h(self) -> int:
        return self.components.shape[0]

    @property
    def n_features(self) -> int:
        return self.components.shape[1]

    def train_mse(self) -> float:
        return self.tail_variance / self.n_features


def _flatten(x, n_features=None):
    x = np.asarray(x, dtype=float)
    if x.ndim >= 3:
        x = x.reshape(x.shape[0], -1)
    if n_features is not None and x.shape[-1] != n_features:
        raise DimensionError(f"expected {n_features} features, got {x.shape[-1]}")
    return x


def sign_convention(components):
    """Flip each row so that its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def pca_fit(fields01, h: int) -> PcaModel:
    """Fit PCA with ``h`` components.

    Parameters
    ----------
    fields01 : array_like, shape (N, n_features) or (N, nlat, nlon)
    h : int
        Latent dimension, ``1 <= h < N`` and ``h <= n_features``.
    """
    x_in = np.asarray(fields01)
    field_shape = tuple(x_in.shape[1:]) if x_in.ndim == 3 else ()
    x = _flatten(x_in)
    n, p = x.shape
    if not 1 <= h < n:
        raise ConfigError(f"need 1 <= h < N, got h={h}, N={n}")
    if h > p:
        raise ConfigError(f"h={h} exceeds the feature count {p}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    eig = s**2 / n
    comps = sign_convention(vt[:h])
    return PcaModel(mean, comps, eig[:h].copy(), float(eig[h:].sum()), field_shape)


def pca_encode(model: PcaModel, field01):
    """Latent code(s) ``components @ (x - mean)``; accepts one field or a batch."""
    x = np.asarray(field01, dtype=float)
    single = x.ndim == 1 or (x.ndim == 2 and model.field_shape and x.shape == model.field_shape)
    xb = _flatten(x[None] if single else x, model.n_features)
    codes = (xb - model.mean) @ model.components.T
    return codes[0] if single else codes


def pca_decode(model: PcaModel, code):
    """Reconstruction ``mean + components.T @ code``, reshaped to fields when known."""
    c = np.asarray(code, dtype=float)
    single = c.ndim == 1
    cb = np.atleast_2d(c)
    if cb.shape[-1] != model.h:
        raise DimensionError(f"code length {cb.shape[-1]} != h={model.h}")
    out = model.mean + cb @ model.components
    if model.field_shape:
        out = out.reshape((len(cb),) + model.field_shape)
    return out[0] if single else out


def reconstruction_mse(model: PcaModel, fields01) -> float:
    x = _flatten(fields01, model.n_features)
    rec = pca_decode(model, pca_encode(model, x)).reshape(x.shape)
    return float(np.mean((x - rec) ** 2))
