"""JIT-compiled inner loops for the hottest elementwise patterns.

The tensor engine's numpy paths remain the reference semantics; these
kernels only accelerate the two layouts that dominate training time
(softmax over the neighbor axis of (B, N, K, D) blocks and last-axis layer
norm).  If numba is unavailable everything silently falls back to numpy.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (len(args) == 1 and callable(args[0])) else args[0]


@njit(cache=True, fastmath=True)
def _softmax_mid(x, out):
    """Softmax over axis 1 of a (M, K, D) array, column-wise per d."""
    m_n, k_n, d_n = x.shape
    for m in range(m_n):
        mx = x[m, 0].copy()
        for k in range(1, k_n):
            for d in range(d_n):
                v = x[m, k, d]
                if v > mx[d]:
                    mx[d] = v
        s = np.zeros(d_n, dtype=x.dtype)
        for k in range(k_n):
            for d in range(d_n):
                e = np.exp(x[m, k, d] - mx[d])
                out[m, k, d] = e
                s[d] += e
        for d in range(d_n):
            s[d] = 1.0 / s[d]
        for k in range(k_n):
            for d in range(d_n):
                out[m, k, d] *= s[d]


@njit(cache=True, fastmath=True)
def _softmax_mid_adjoint(y, g, out):
    """dx = y * (g - sum_k(g * y)) over axis 1 of (M, K, D)."""
    m_n, k_n, d_n = y.shape
    for m in range(m_n):
        inner = np.zeros(d_n, dtype=y.dtype)
        for k in range(k_n):
            for d in range(d_n):
                inner[d] += g[m, k, d] * y[m, k, d]
        for k in range(k_n):
            for d in range(d_n):
                out[m, k, d] = y[m, k, d] * (g[m, k, d] - inner[d])


@njit(cache=True, fastmath=True)
def _layer_norm_fwd(x, gain, bias, eps, out, mu, inv):
    """Row-wise standardize + affine over the last axis of (M, D)."""
    m_n, d_n = x.shape
    for m in range(m_n):
        s = 0.0
        for d in range(d_n):
            s += x[m, d]
        mean = s / d_n
        v = 0.0
        for d in range(d_n):
            c = x[m, d] - mean
            v += c * c
        iv = 1.0 / np.sqrt(v / d_n + eps)
        mu[m] = mean
        inv[m] = iv
        for d in range(d_n):
            out[m, d] = (x[m, d] - mean) * iv * gain[d] + bias[d]


@njit(cache=True, fastmath=True)
def _layer_norm_bwd(x, g, gain, mu, inv, dx, dgain, dbias):
    """Input/gain/bias adjoints for _layer_norm_fwd."""
    m_n, d_n = x.shape
    for d in range(d_n):
        dgain[d] = 0.0
        dbias[d] = 0.0
    for m in range(m_n):
        iv = inv[m]
        mean = mu[m]
        gm = 0.0
        gy = 0.0
        for d in range(d_n):
            y = (x[m, d] - mean) * iv
            gg = g[m, d]
            dbias[d] += gg
            dgain[d] += gg * y
            w = gg * gain[d]
            gm += w
            gy += w * y
        gm /= d_n
        gy /= d_n
        for d in range(d_n):
            y = (x[m, d] - mean) * iv
            dx[m, d] = (g[m, d] * gain[d] - gm - y * gy) * iv


def softmax_mid_axis(x):
    """Softmax over axis -2 of a contiguous (..., K, D) array, or None."""
    if not HAVE_NUMBA or x.ndim < 3 or not x.flags["C_CONTIGUOUS"]:
        return None
    shape = x.shape
    x3 = x.reshape(-1, shape[-2], shape[-1])
    out = np.empty_like(x3)
    _softmax_mid(x3, out)
    return out.reshape(shape)


def softmax_mid_adjoint(y, g):
    if not HAVE_NUMBA or y.ndim < 3 or not y.flags["C_CONTIGUOUS"]:
        return None
    shape = y.shape
    y3 = y.reshape(-1, shape[-2], shape[-1])
    g3 = np.ascontiguousarray(g).reshape(y3.shape)
    out = np.empty_like(y3)
    _softmax_mid_adjoint(y3, g3, out)
    return out.reshape(shape)


def layer_norm_fwd(x, gain, bias, eps):
    """Returns (out, mu, inv) or None when the fast path does not apply."""
    if not HAVE_NUMBA or x.ndim < 2 or not x.flags["C_CONTIGUOUS"]:
        return None
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    out = np.empty_like(x2)
    mu = np.empty(x2.shape[0], dtype=x.dtype)
    inv = np.empty(x2.shape[0], dtype=x.dtype)
    _layer_norm_fwd(x2, gain, bias, x.dtype.type(eps), out, mu, inv)
    return out.reshape(shape), mu, inv


def layer_norm_bwd(x, g, gain, mu, inv):
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    g2 = np.ascontiguousarray(g).reshape(x2.shape)
    dx = np.empty_like(x2)
    dgain = np.empty_like(gain)
    dbias = np.empty_like(gain)
    _layer_norm_bwd(x2, g2, gain, mu, inv, dx, dgain, dbias)
    return dx.reshape(shape), dgain, dbias
