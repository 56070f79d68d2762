"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def max_pool(x):
    """Per-channel maximum over axis 1 of ``(B, W, C)``; ties go to the lowest index."""
    idx = np.ascontiguousarray(x.transpose(0, 2, 1)).argmax(axis=2)
    return np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :], idx


def bn_train(z, gamma, beta, eps, relu):
    """Batch statistics over rows of ``(N, C)``; returns ``y, xhat, inv, mean, var``."""
    mean = z.mean(axis=0, dtype=np.float64)
    zc = z - mean.astype(z.dtype)
    var = np.einsum("nc,nc->c", zc, zc, dtype=np.float64) / z.shape[0]
    inv = (1.0 / np.sqrt(var + eps)).astype(z.dtype)
    xhat = zc
    xhat *= inv
    y = xhat * gamma
    y += beta
    if relu:
        np.maximum(y, 0, out=y)
    return y, xhat, inv, mean.astype(z.dtype), var.astype(z.dtype)


def bn_eval(z, mean, var, gamma, beta, eps, relu):
    """Normalize with stored statistics, overwriting ``z`` in place."""
    scale = gamma / np.sqrt(var.astype(np.float64) + eps)
    shift = beta - mean * scale
    z *= scale.astype(z.dtype)
    z += shift.astype(z.dtype)
    if relu:
        np.maximum(z, 0, out=z)
    return z


def bn_backward(dy, y, xhat, gamma, inv, relu):
    """Returns ``dz, dgamma, dbeta`` for the fused normalization + ReLU."""
    if relu:
        dy = np.where(y > 0, dy, 0).astype(dy.dtype, copy=False)
    n = dy.shape[0]
    s1 = dy.sum(axis=0, dtype=np.float64)
    s2 = np.einsum("nc,nc->c", dy, xhat, dtype=np.float64)
    k = (gamma * inv / n).astype(np.float64)
    dz = dy * (n * k).astype(dy.dtype)
    dz -= (k * s1).astype(dy.dtype)
    dz -= xhat * (k * s2).astype(dy.dtype)
    return dz, s2.astype(dy.dtype), s1.astype(dy.dtype)


def adam_update(w, g, m, v, step, b1, b2, c2, eps):
    """One ADAM step on flat arrays, in place; ``step`` is ``lr / (1 - b1**t)``."""
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    denom = np.sqrt(v / c2)
    denom += eps
    w -= step * m / denom
