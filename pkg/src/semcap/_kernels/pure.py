"""Numpy reference implementations of the hot kernels.

Every function here has a compiled twin in _fastcore.pyx with the same
signature and semantics; tests assert the two backends agree. Row-oriented
kernels (softmax, layer_norm) take C-contiguous 2D arrays, elementwise
kernels take arrays of any shape, adam_step takes flat 1D views.
"""

import numpy as np

NAME = "pure"

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_bwd(y, gy):
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def log_softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
    return s - lse


def log_softmax_bwd(y, gy):
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def layer_norm_fwd(x, gain, bias, eps):
    """Returns (out, xhat, inv_std); xhat and inv_std are saved for backward."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, np.ascontiguousarray(inv[:, 0])


def layer_norm_bwd(xhat, inv_std, gain, gy):
    gxhat = gy * gain
    gbias = gy.sum(axis=0)
    ggain = (gy * xhat).sum(axis=0)
    mean_g = gxhat.mean(axis=1, keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = inv_std[:, None] * (gxhat - mean_g - xhat * mean_gx)
    return gx, ggain, gbias


def gelu_fwd(x):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, gy):
    x2 = x * x
    u = _GELU_C0 * x * (1.0 + _GELU_C1 * x2)
    t = np.tanh(u)
    du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x2)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def sigmoid_fwd(x):
    # split by sign to avoid exp overflow on large negative inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_bwd(y, gy):
    return gy * y * (1.0 - y)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2):
    """In-place Adam update; bias1/bias2 are 1 - beta^t correction factors."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


def matmul_exact(a, b):
    """Matrix product with strictly sequential accumulation over the inner
    axis, so the result is bit-for-bit reproducible against a scalar
    triple-loop reference. Used for the float64 verification mode; float32
    training goes through BLAS instead.
    """
    k = a.shape[1]
    c = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for t in range(k):
        c += a[:, t, None] * b[None, t, :]
    return c
