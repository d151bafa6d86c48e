"""Functional array kernels for the layer set.

Arrays are numpy ``ndarray`` in channel-first layout. Every spatial op accepts
either a single sample ``(C, H, W)`` or a batch ``(N, C, H, W)`` and returns
the same rank it was given.

"Convolution" here is cross-correlation (no kernel flip), as in every deep
learning framework. The transposed convolution is defined as the exact adjoint
of ``conv2d_forward`` with the same kernel, stride and padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DimensionError

ACTIVATIONS = ("relu", "linear", "sigmoid", "softplus")


def _pair(v) -> tuple[int, int]:
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def tconv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n - 1) * s - 2 * p + k


def pad2d(x: np.ndarray, padding) -> np.ndarray:
    ph, pw = _pair(padding)
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def im2col(xpad: np.ndarray, kernel, stride) -> np.ndarray:
    """Strided window view of a padded batch: ``(N, C, Ho, Wo, kh, kw)``. No copy."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def col2im(cols: np.ndarray, padded_shape, stride) -> np.ndarray:
    """Scatter-add windows ``(N, C, Ho, Wo, kh, kw)`` back onto a padded grid."""
    n, c, ho, wo, kh, kw = cols.shape
    sh, sw = _pair(stride)
    out = np.zeros((n, c) + tuple(padded_shape), dtype=cols.dtype)
    for i in range(kh):
        hi = i + sh * (ho - 1) + 1
        for j in range(kw):
            out[:, :, i:hi:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, :, :, :, i, j]
    return out


def conv2d_forward(x, kernels, bias, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    Parameters
    ----------
    x : ndarray, shape (C, H, W) or (N, C, H, W)
    kernels : ndarray, shape (F, C, kh, kw)
    bias : ndarray, shape (F,)
    stride, padding : int or (int, int)

    Returns
    -------
    ndarray, shape (F, H', W') or (N, F, H', W') with
    ``H' = floor((H + 2 ph - kh) / sh) + 1``.
    """
    xb, single = _batched(np.asarray(x))
    f, c, kh, kw = kernels.shape
    if xb.shape[1] != c:
        raise DimensionError(f"input has {xb.shape[1]} channels, kernels expect {c}")
    ph, pw = _pair(padding)
    if xb.shape[2] + 2 * ph < kh or xb.shape[3] + 2 * pw < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {xb.shape[2] + 2 * ph}x{xb.shape[3] + 2 * pw}"
        )
    y = _correlate(pad2d(xb, padding), kernels, _pair(stride))
    y += bias.reshape(1, -1, 1, 1)
    return y[0] if single else y


def _correlate(xpad, kernels, stride):
    f, c, kh, kw = kernels.shape
    sh, sw = stride
    if (sh, sw) == (1, 1) and f < c:
        # contract channels first, then shift-add the kh*kw partial maps
        n, _, hp, wp = xpad.shape
        ho, wo = hp - kh + 1, wp - kw + 1
        z = np.tensordot(kernels, xpad, axes=([1], [1]))  # (F, kh, kw, N, Hp, Wp)
        y = np.zeros((f, n, ho, wo), dtype=z.dtype)
        for i in range(kh):
            for j in range(kw):
                y += z[:, i, j, :, i:i + ho, j:j + wo]
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    cols = im2col(xpad, (kh, kw), stride)
    y = np.tensordot(cols, kernels, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(dy, x, kernels, stride=1, padding=0, need_input_grad=True):
    """Gradients of ``conv2d_forward`` w.r.t. input, kernels and bias (batched)."""
    ph, pw = _pair(padding)
    xpad = pad2d(x, padding)
    f, c, kh, kw = kernels.shape
    if _pair(stride) == (1, 1) and f * c <= 16:
        # with a single channel on either side a strided einsum beats materializing im2col
        ho, wo = dy.shape[2:]
        dk = np.empty(kernels.shape, dtype=np.result_type(dy, x))
        for i in range(kh):
            for j in range(kw):
                dk[:, :, i, j] = np.einsum("nfhw,nchw->fc", dy, xpad[:, :, i:i + ho, j:j + wo])
    else:
        cols = im2col(xpad, (kh, kw), stride)
        dk = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_input_grad:
        if _pair(stride) == (1, 1) and ph < kh and pw < kw:
            # stride-1 input gradient is a full correlation with the flipped kernel
            flipped = kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dx = _correlate(pad2d(dy, (kh - 1 - ph, kw - 1 - pw)), flipped, (1, 1))
        else:
            dcols = np.tensordot(dy, kernels, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
            dxpad = col2im(dcols.transpose(0, 3, 1, 2, 4, 5), xpad.shape[2:], stride)
            dx = dxpad[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    return dx, dk, db


def tconv2d_forward(x, kernels, bias, stride=1, padding=0):
    """Transposed 2-D convolution, the adjoint of ``conv2d_forward``.

    ``kernels`` has shape ``(C_in, C_out, kh, kw)``; read as a conv2d kernel it
    maps ``C_out -> C_in`` and this function applies its transpose. Output
    extent is ``(H - 1) sh - 2 ph + kh``.
    """
    xb, single = _batched(np.asarray(x))
    cin, cout, kh, kw = kernels.shape
    if xb.shape[1] != cin:
        raise DimensionError(f"input has {xb.shape[1]} channels, kernels expect {cin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if ph >= kh or pw >= kw:
        raise ConfigError(f"padding ({ph},{pw}) must be smaller than kernel ({kh},{kw})")
    ho = tconv_output_size(xb.shape[2], kh, sh, ph)
    wo = tconv_output_size(xb.shape[3], kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ConfigError(f"transposed convolution yields non-positive extent ({ho}, {wo})")
    if _polyphase_ok(kernels.shape, (sh, sw), (ph, pw)):
        y = _tconv_polyphase(xb, kernels, (sh, sw), (ph, pw))
    else:
        cols = np.tensordot(xb, kernels, axes=([1], [0]))  # (N, H, W, C_out, kh, kw)
        ypad = col2im(cols.transpose(0, 3, 1, 2, 4, 5), (ho + 2 * ph, wo + 2 * pw), (sh, sw))
        y = np.ascontiguousarray(ypad[:, :, ph:ph + ho, pw:pw + wo])
    y += bias.reshape(1, -1, 1, 1)
    return y[0] if single else y


# Polyphase path: when kernel and padding are multiples of the stride, each of the
# sh*sw output phases is a stride-1 correlation of the input with a (k/s)x(k/s)
# sub-kernel, so the whole transposed conv is one GEMM plus a pixel shuffle.


def _polyphase_ok(kshape, stride, padding):
    kh, kw = kshape[2:]
    (sh, sw), (ph, pw) = stride, padding
    return (sh > 1 or sw > 1) and kh % sh == 0 and kw % sw == 0 and ph % sh == 0 and pw % sw == 0


def _polyphase_kernel(kernels, stride, padding):
    cin, cout, kh, kw = kernels.shape
    sh, sw = stride
    qh, qw = kh // sh, kw // sw
    # K[c, o, s*(Q-1-j) + r] -> Kp[c, j, o, r]
    kp = kernels.reshape(cin, cout, qh, sh, qw, sw)[:, :, ::-1, :, ::-1, :]
    kp = kp.transpose(0, 2, 4, 1, 3, 5)  # (C_in, qh, qw, C_out, sh, sw)
    lh, lw = qh - 1 - padding[0] // sh, qw - 1 - padding[1] // sw
    return kp, (lh, lw)


def _tconv_polyphase(xb, kernels, stride, padding):
    kp, pad = _polyphase_kernel(kernels, stride, padding)
    cols = im2col(pad2d(xb, pad), kp.shape[1:3], 1)  # (N, C_in, V, Vw, qh, qw)
    ysub = np.tensordot(cols, kp, axes=([1, 4, 5], [0, 1, 2]))  # (N, V, Vw, C_out, sh, sw)
    n, v, vw, cout, sh, sw = ysub.shape
    return ysub.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, v * sh, vw * sw)


def _tconv_polyphase_backward(dy, x, kernels, stride, padding, need_input_grad):
    kp, pad = _polyphase_kernel(kernels, stride, padding)
    cin, qh, qw, cout, sh, sw = kp.shape
    n, _, ho, wo = dy.shape
    dysub = dy.reshape(n, cout, ho // sh, sh, wo // sw, sw).transpose(0, 2, 4, 1, 3, 5)
    xpad = pad2d(x, pad)
    cols = im2col(xpad, (qh, qw), 1)
    dkp = np.tensordot(cols, dysub, axes=([0, 2, 3], [0, 1, 2]))  # (C_in, qh, qw, C_out, sh, sw)
    dk = dkp.transpose(0, 3, 1, 4, 2, 5)[:, :, ::-1, :, ::-1, :].reshape(kernels.shape)
    dx = None
    if need_input_grad:
        dcols = np.tensordot(dysub, kp, axes=([3, 4, 5], [3, 4, 5]))  # (N, V, Vw, C_in, qh, qw)
        dxpad = col2im(dcols.transpose(0, 3, 1, 2, 4, 5), xpad.shape[2:], 1)
        dx = dxpad[:, :, pad[0]:pad[0] + x.shape[2], pad[1]:pad[1] + x.shape[3]]
    return dx, dk, dy.sum(axis=(0, 2, 3))


def tconv2d_backward(dy, x, kernels, stride=1, padding=0, need_input_grad=True):
    if _polyphase_ok(kernels.shape, _pair(stride), _pair(padding)):
        return _tconv_polyphase_backward(
            dy, x, kernels, _pair(stride), _pair(padding), need_input_grad
        )
    cols = im2col(pad2d(dy, padding), kernels.shape[2:], stride)
    # the forward scatter may leave trailing rows untouched when the conv geometry is not exact
    cols = cols[:, :, : x.shape[2], : x.shape[3]]
    dk = np.tensordot(x, cols, axes=([0, 2, 3], [0, 2, 3]))  # (C_in, C_out, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_input_grad:
        dx = np.tensordot(cols, kernels, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return dx, dk, db


def maxpool2d(x, window=3, stride=None, padding=0):
    """Max pooling; returns ``(pooled, argmax)``.

    ``argmax`` holds the flat index into each ``kh*kw`` window and is what
    ``maxpool2d_backward`` needs. Padding cells are ``-inf`` and never win.
    """
    xb, single = _batched(np.asarray(x))
    kh, kw = _pair(window)
    sh, sw = _pair(window if stride is None else stride)
    ph, pw = _pair(padding)
    if xb.shape[2] + 2 * ph < kh or xb.shape[3] + 2 * pw < kw:
        raise DimensionError(
            f"pool window {kh}x{kw} larger than padded input {xb.shape[2] + 2 * ph}x{xb.shape[3] + 2 * pw}"
        )
    xpad = xb if ph == pw == 0 else np.pad(
        xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf
    )
    win = im2col(xpad, (kh, kw), (sh, sw))
    flat = win.reshape(win.shape[:4] + (kh * kw,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(dy, argmax, input_shape, window=3, stride=None, padding=0):
    kh, kw = _pair(window)
    sh, sw = _pair(window if stride is None else stride)
    ph, pw = _pair(padding)
    n, c, h, w = input_shape
    onehot = np.zeros(dy.shape + (kh * kw,), dtype=dy.dtype)
    np.put_along_axis(onehot, argmax[..., None], dy[..., None], axis=-1)
    cols = onehot.reshape(dy.shape + (kh, kw))
    dxpad = col2im(cols, (h + 2 * ph, w + 2 * pw), (sh, sw))
    return dxpad[:, :, ph:ph + h, pw:pw + w]


def activate(z, kind: str):
    if kind == "linear":
        return z
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softplus":
        return softplus(z)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(z, a, kind: str):
    """Derivative of the activation at pre-activation ``z`` (``a`` = activated)."""
    if kind == "linear":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "sigmoid":
        return a * (1 - a)
    if kind == "softplus":
        return sigmoid(z)
    raise ConfigError(f"unknown activation {kind!r}")


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    z = np.asarray(z)
    return np.logaddexp(0, z).astype(np.result_type(z, np.float32), copy=False)


def softplus_inv(s):
    s = np.asarray(s, dtype=float)
    # log(expm1(s)) loses precision for large s
    return np.where(s > 30, s, np.log(np.expm1(np.minimum(s, 30))))


def dense_forward(x, weights, bias, activation="linear"):
    """``activation(W x + b)`` for ``x`` of shape (n,) or (N, n); ``W`` is (m, n)."""
    x = np.asarray(x)
    if x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"input width {x.shape[-1]} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match weights {weights.shape}")
    return activate(x @ weights.T + bias, activation)
