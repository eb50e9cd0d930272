# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in pure.py.

Single fused loops over the data, float32 and float64 specialisations via a
fused type. Row reductions (softmax, layer norm) accumulate in double for
both dtypes; elementwise transforms and the Adam update run in the operand
precision with precision-matched libm calls, which is what the numpy
fallback does too. Tests compare the backends with a small tolerance.
"""

import numpy as np

from libc.math cimport exp, expf, log, sqrt, sqrtf, tanh, tanhf

NAME = "fast"

ctypedef fused real:
    float
    double

cdef double _GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
cdef double _GELU_C1 = 0.044715


cdef inline real _exp_r(real x) noexcept nogil:
    if real is float:
        return expf(x)
    else:
        return exp(x)


cdef inline real _tanh_r(real x) noexcept nogil:
    if real is float:
        return tanhf(x)
    else:
        return tanh(x)


cdef inline real _sqrt_r(real x) noexcept nogil:
    if real is float:
        return sqrtf(x)
    else:
        return sqrt(x)


cdef inline object _empty2(Py_ssize_t n, Py_ssize_t d, bint single):
    return np.empty((n, d), dtype=np.float32 if single else np.float64)


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_np = _empty2(n, d, real is float)
    cdef real[:, ::1] out = out_np
    cdef double m, s, e
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = exp(<double> x[i, j] - m)
            out[i, j] = <real> e
            s += e
        for j in range(d):
            out[i, j] = <real> (out[i, j] / s)
    return out_np


def softmax_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    gx_np = _empty2(n, d, real is float)
    cdef real[:, ::1] gx = gx_np
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += <double> y[i, j] * <double> gy[i, j]
        for j in range(d):
            gx[i, j] = <real> (<double> y[i, j] * (<double> gy[i, j] - dot))
    return gx_np


def log_softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_np = _empty2(n, d, real is float)
    cdef real[:, ::1] out = out_np
    cdef double m, s, lse
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            s += exp(<double> x[i, j] - m)
        lse = log(s)
        for j in range(d):
            out[i, j] = <real> (<double> x[i, j] - m - lse)
    return out_np


def log_softmax_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    gx_np = _empty2(n, d, real is float)
    cdef real[:, ::1] gx = gx_np
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += <double> gy[i, j]
        for j in range(d):
            gx[i, j] = <real> (<double> gy[i, j] - exp(<double> y[i, j]) * s)
    return gx_np


def layer_norm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_np = _empty2(n, d, real is float)
    xhat_np = _empty2(n, d, real is float)
    inv_np = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_np
    cdef real[:, ::1] xhat = xhat_np
    cdef real[::1] inv = inv_np
    cdef double mu, var, xc, istd
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += <double> x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            xc = <double> x[i, j] - mu
            var += xc * xc
        var /= d
        istd = 1.0 / sqrt(var + eps)
        inv[i] = <real> istd
        for j in range(d):
            xc = (<double> x[i, j] - mu) * istd
            xhat[i, j] = <real> xc
            out[i, j] = <real> (xc * <double> gain[j] + <double> bias[j])
    return out_np, xhat_np, inv_np


def layer_norm_bwd(real[:, ::1] xhat, real[::1] inv_std, real[::1] gain,
                   real[:, ::1] gy):
    cdef Py_ssize_t n = xhat.shape[0], d = xhat.shape[1], i, j
    gx_np = _empty2(n, d, real is float)
    ggain_np = np.zeros(d, dtype=np.float32 if real is float else np.float64)
    gbias_np = np.zeros(d, dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gx = gx_np
    cdef real[::1] ggain = ggain_np
    cdef real[::1] gbias = gbias_np
    cdef double mean_g, mean_gx, gxh
    for i in range(n):
        mean_g = 0.0
        mean_gx = 0.0
        for j in range(d):
            gxh = <double> gy[i, j] * <double> gain[j]
            mean_g += gxh
            mean_gx += gxh * <double> xhat[i, j]
            ggain[j] += <real> (<double> gy[i, j] * <double> xhat[i, j])
            gbias[j] += gy[i, j]
        mean_g /= d
        mean_gx /= d
        for j in range(d):
            gxh = <double> gy[i, j] * <double> gain[j]
            gx[i, j] = <real> (<double> inv_std[i]
                               * (gxh - mean_g - <double> xhat[i, j] * mean_gx))
    return gx_np, ggain_np, gbias_np


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_np = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_np
    cdef real xv, u
    cdef real c0 = <real> _GELU_C0
    cdef real c1 = <real> _GELU_C1
    for i in range(n):
        xv = x[i]
        u = c0 * (xv + c1 * xv * xv * xv)
        out[i] = <real> 0.5 * xv * (<real> 1.0 + _tanh_r(u))
    return out_np


def gelu_bwd(real[::1] x, real[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    gx_np = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] gx = gx_np
    cdef real xv, x2, u, t, du
    cdef real c0 = <real> _GELU_C0
    cdef real c1 = <real> _GELU_C1
    cdef real half = <real> 0.5
    cdef real one = <real> 1.0
    cdef real three = <real> 3.0
    for i in range(n):
        xv = x[i]
        x2 = xv * xv
        u = c0 * xv * (one + c1 * x2)
        t = _tanh_r(u)
        du = c0 * (one + three * c1 * x2)
        gx[i] = gy[i] * (half * (one + t) + half * xv * (one - t * t) * du)
    return gx_np


def sigmoid_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_np = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_np
    cdef real xv, e
    cdef real one = <real> 1.0
    for i in range(n):
        xv = x[i]
        if xv >= 0:
            out[i] = one / (one + _exp_r(-xv))
        else:
            e = _exp_r(xv)
            out[i] = e / (one + e)
    return out_np


def sigmoid_bwd(real[::1] y, real[::1] gy):
    cdef Py_ssize_t n = y.shape[0], i
    gx_np = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] gx = gx_np
    cdef real one = <real> 1.0
    for i in range(n):
        gx[i] = gy[i] * y[i] * (one - y[i])
    return gx_np


def matmul_exact(real[:, ::1] a, real[:, ::1] b):
    # sequential accumulation over the inner axis, bitwise-stable against a
    # scalar triple-loop reference (accumulates in the operand precision)
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1], i, j, t
    if real is float:
        c_np = np.zeros((m, n), dtype=np.float32)
    else:
        c_np = np.zeros((m, n), dtype=np.float64)
    cdef real[:, ::1] c = c_np
    cdef real s
    for i in range(m):
        for j in range(n):
            s = 0
            for t in range(k):
                s = s + a[i, t] * b[t, j]
            c[i, j] = s
    return c_np


def adam_step(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
              double lr, double beta1, double beta2, double eps,
              double bias1, double bias2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef real b1 = <real> beta1
    cdef real b2 = <real> beta2
    cdef real one = <real> 1.0
    cdef real lr_r = <real> lr
    cdef real eps_r = <real> eps
    cdef real ib1 = <real> (1.0 / bias1)
    cdef real ib2 = <real> (1.0 / bias2)
    cdef real mi, vi
    for i in range(n):
        mi = b1 * m[i] + (one - b1) * g[i]
        vi = b2 * v[i] + (one - b2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] = p[i] - lr_r * (mi * ib1) / (_sqrt_r(vi * ib2) + eps_r)
    return None
