"""Loss-driven backward pass and a finite-difference gradient checker."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError


def mse_loss(pred, target):
    """Mean squared error over every element, and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def backward(network, batch, loss):
    """Run ``network`` on ``batch = (inputs, targets)`` and backpropagate ``loss``.

    ``loss(pred, target)`` must return ``(value, d value / d pred)``. Returns
    ``(value, gradients)`` where gradients follow ``network.parameters()``.
    """
    x, y = batch
    network.zero_grad()
    pred = network.forward(x)
    value, dpred = loss(pred, y)
    if not np.isfinite(value):
        raise NumericError("non-finite loss", layer_index=len(network.layers) - 1)
    network.backward(dpred)
    return value, network.gradients()


def grad_check(f, params, eps=1e-5, max_entries=None, rng=None, kink_tol=1e-3):
    """Maximum relative error between analytic and central-difference gradients.

    Parameters
    ----------
    f : callable
        ``f() -> (loss, grads)`` evaluated at the current contents of ``params``;
        ``grads`` is aligned with ``params``.
    params : list of float64 ndarrays, perturbed in place and restored.
    eps : float
        Central-difference step.
    max_entries : int, optional
        Check at most this many randomly chosen entries per array.
    kink_tol : float
        Entries whose one-sided slopes disagree by more than this (relative)
        straddle a non-differentiable point such as a ReLU kink and are skipped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads = f()
    grads = [np.array(g, dtype=float, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()[0]
            flat[i] = orig - eps
            fm = f()[0]
            flat[i] = orig
            f0 = f()[0]
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            scale = max(abs(fwd), abs(bwd), 1e-6)
            if abs(fwd - bwd) / scale > kink_tol:
                continue
            num = (fp - fm) / (2 * eps)
            ana = g.reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
    return worst
