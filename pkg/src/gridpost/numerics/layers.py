"""Differentiable layers and a sequential container with reverse-mode backward.

Each layer caches what it needs during ``forward`` and turns an upstream
gradient into an input gradient in ``backward``, accumulating parameter
gradients into ``self.grads`` (same keys as ``self.params``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DimensionError, NumericError
from . import ops

LAYER_KINDS = ("dense", "conv2d", "tconv2d", "maxpool2d", "activation", "flatten", "reshape")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; ``build_layer`` turns it into an object."""

    kind: str
    filters: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    activation: str = "linear"
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.kind in ("conv2d", "tconv2d", "maxpool2d"):
            if min(self.kernel) < 1 or min(self.stride) < 1:
                raise ConfigError(f"{self.kind}: kernel and stride must be positive")
            if min(self.padding) < 0:
                raise ConfigError(f"{self.kind}: padding must be non-negative")
        if self.kind in ("dense", "conv2d", "tconv2d") and self.filters < 1:
            raise ConfigError(f"{self.kind}: filters/units must be >= 1")


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return in_shape

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        super().__init__()
        self.params["W"] = glorot_uniform(rng, (n_out, n_in), n_in, n_out, dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return ops.dense_forward(x, self.params["W"], self.params["b"])

    def backward(self, dy):
        self.grads["W"] += dy.T @ self._x
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"]

    def output_shape(self, in_shape):
        return (self.params["W"].shape[0],)


class Conv2D(Layer):
    def __init__(self, c_in, filters, kernel, stride, padding, rng, dtype=np.float32):
        super().__init__()
        kh, kw = kernel
        self.stride, self.padding = stride, padding
        self.params["K"] = glorot_uniform(
            rng, (filters, c_in, kh, kw), c_in * kh * kw, filters * kh * kw, dtype
        )
        self.params["b"] = np.zeros(filters, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return ops.conv2d_forward(x, self.params["K"], self.params["b"], self.stride, self.padding)

    def backward(self, dy, need_input_grad=True):
        dx, dk, db = ops.conv2d_backward(
            dy, self._x, self.params["K"], self.stride, self.padding, need_input_grad
        )
        self.grads["K"] += dk
        self.grads["b"] += db
        return dx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        f, _, kh, kw = self.params["K"].shape
        return (
            f,
            ops.conv_output_size(h, kh, self.stride[0], self.padding[0]),
            ops.conv_output_size(w, kw, self.stride[1], self.padding[1]),
        )


class ConvTranspose2D(Layer):
    def __init__(self, c_in, filters, kernel, stride, padding, rng, dtype=np.float32):
        super().__init__()
        kh, kw = kernel
        if padding[0] >= kh or padding[1] >= kw:
            raise ConfigError(f"tconv2d padding {padding} must be smaller than kernel {kernel}")
        self.stride, self.padding = stride, padding
        # fan-in of the transpose is what a conv2d with this kernel sees on its output side
        self.params["K"] = glorot_uniform(
            rng, (c_in, filters, kh, kw), filters * kh * kw, c_in * kh * kw, dtype
        )
        self.params["b"] = np.zeros(filters, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return ops.tconv2d_forward(x, self.params["K"], self.params["b"], self.stride, self.padding)

    def backward(self, dy):
        dx, dk, db = ops.tconv2d_backward(dy, self._x, self.params["K"], self.stride, self.padding)
        self.grads["K"] += dk
        self.grads["b"] += db
        return dx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        _, f, kh, kw = self.params["K"].shape
        return (
            f,
            ops.tconv_output_size(h, kh, self.stride[0], self.padding[0]),
            ops.tconv_output_size(w, kw, self.stride[1], self.padding[1]),
        )


class MaxPool2D(Layer):
    def __init__(self, window, stride, padding=(0, 0)):
        super().__init__()
        self.window, self.stride, self.padding = window, stride, padding

    def forward(self, x):
        self._shape = x.shape
        y, self._argmax = ops.maxpool2d(x, self.window, self.stride, self.padding)
        return y

    def backward(self, dy):
        return ops.maxpool2d_backward(
            dy, self._argmax, self._shape, self.window, self.stride, self.padding
        )

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h + 2 * self.padding[0] < self.window[0] or w + 2 * self.padding[1] < self.window[1]:
            raise DimensionError(f"pool window {self.window} larger than input {h}x{w}")
        return (
            c,
            ops.conv_output_size(h, self.window[0], self.stride[0], self.padding[0]),
            ops.conv_output_size(w, self.window[1], self.stride[1], self.padding[1]),
        )


class Activation(Layer):
    def __init__(self, kind):
        super().__init__()
        if kind not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, z):
        self._z = z
        self._a = ops.activate(z, self.kind)
        return self._a

    def backward(self, dy):
        return dy * ops.activation_grad(self._z, self._a, self.kind)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise DimensionError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape


class Embedding(Layer):
    """Lookup table; input is an integer index vector, output ``(N, dim)``."""

    def __init__(self, n_items, dim, rng, dtype=np.float32, scale=0.05):
        super().__init__()
        self.params["E"] = rng.uniform(-scale, scale, size=(n_items, dim)).astype(dtype)
        self.zero_grad()

    def forward(self, idx):
        self._idx = np.asarray(idx)
        return self.params["E"][self._idx]

    def backward(self, dy):
        np.add.at(self.grads["E"], self._idx, dy)
        return None


def build_layer(spec: LayerSpec, in_shape, rng, dtype=np.float32) -> Layer:
    if spec.kind == "dense":
        if len(in_shape) != 1:
            raise DimensionError(f"dense layer needs flat input, got {in_shape}")
        return Dense(in_shape[0], spec.filters, rng, dtype)
    if spec.kind == "conv2d":
        return Conv2D(in_shape[0], spec.filters, spec.kernel, spec.stride, spec.padding, rng, dtype)
    if spec.kind == "tconv2d":
        return ConvTranspose2D(
            in_shape[0], spec.filters, spec.kernel, spec.stride, spec.padding, rng, dtype
        )
    if spec.kind == "maxpool2d":
        return MaxPool2D(spec.kernel, spec.stride, spec.padding)
    if spec.kind == "activation":
        return Activation(spec.activation)
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "reshape":
        return Reshape(spec.shape)
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


class Sequential:
    """A chain of layers. ``forward``/``backward`` run over a leading batch axis."""

    def __init__(self, layers, names=None):
        self.layers = list(layers)
        self.names = list(names) if names is not None else [type(l).__name__ for l in self.layers]
        self.check_finite = True

    @classmethod
    def from_specs(cls, specs, in_shape, rng, dtype=np.float32):
        layers, names = [], []
        shape = tuple(in_shape)
        for i, spec in enumerate(specs):
            try:
                layer = build_layer(spec, shape, rng, dtype)
                shape = layer.output_shape(shape)
            except (DimensionError, ConfigError) as exc:
                raise type(exc)(f"layer {i} ({spec.kind}): {exc}") from exc
            if min(shape) < 1:
                raise DimensionError(f"layer {i} ({spec.kind}) yields empty shape {shape}")
            layers.append(layer)
            names.append(f"{i}:{spec.kind}")
        net = cls(layers, names)
        net.in_shape, net.out_shape = tuple(in_shape), shape
        return net

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if self.check_finite and not np.all(np.isfinite(x)):
                raise NumericError("non-finite activation in forward pass", layer_index=i)
        return x

    def backward(self, dy):
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and isinstance(layer, Conv2D):
                # the network input never needs a gradient
                layer.backward(dy, need_input_grad=False)
                return None
            dy = layer.backward(dy)
            if self.check_finite and dy is not None and not np.all(np.isfinite(dy)):
                raise NumericError("non-finite gradient in backward pass", layer_index=i)
        return dy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        """Flat list of parameter arrays (stable order)."""
        return [layer.params[k] for layer in self.layers for k in sorted(layer.params)]

    def gradients(self):
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]

    def param_names(self):
        return [f"{n}.{k}" for n, layer in zip(self.names, self.layers) for k in sorted(layer.params)]

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))
