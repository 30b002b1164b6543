"""Numba-jitted twins of the numpy kernels.

Plain serial loops, fastmath off: each backend must be deterministic on
its own, and the two must agree to ~1e-12 (summation order differs).
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def softmax2d(x):
    rows, cols = x.shape
    out = np.empty((rows, cols))
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            e = np.exp(x[r, c] - m)
            out[r, c] = e
            s += e
        for c in range(cols):
            out[r, c] /= s
    return out


@njit(cache=True)
def masked_softmax2d(x, keep):
    rows, cols = x.shape
    out = np.zeros((rows, cols))
    for r in range(rows):
        m = -np.inf
        for c in range(cols):
            if keep[r, c] and x[r, c] > m:
                m = x[r, c]
        if m == -np.inf:
            continue  # fully masked row stays zero
        s = 0.0
        for c in range(cols):
            if keep[r, c]:
                e = np.exp(x[r, c] - m)
                out[r, c] = e
                s += e
        for c in range(cols):
            out[r, c] /= s
    return out


@njit(cache=True)
def softmax_backward2d(y, g):
    rows, cols = y.shape
    out = np.empty((rows, cols))
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += y[r, c] * g[r, c]
        for c in range(cols):
            out[r, c] = y[r, c] * (g[r, c] - dot)
    return out


@njit(cache=True)
def layernorm2d(x, eps):
    rows, cols = x.shape
    xhat = np.empty((rows, cols))
    inv_std = np.empty(rows)
    for r in range(rows):
        mean = 0.0
        for c in range(cols):
            mean += x[r, c]
        mean /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - mean
            var += d * d
        var /= cols
        istd = 1.0 / np.sqrt(var + eps)
        inv_std[r] = istd
        for c in range(cols):
            xhat[r, c] = (x[r, c] - mean) * istd
    return xhat, inv_std


@njit(cache=True)
def layernorm_backward2d(xhat, inv_std, g):
    rows, cols = xhat.shape
    out = np.empty((rows, cols))
    for r in range(rows):
        gm = 0.0
        gxm = 0.0
        for c in range(cols):
            gm += g[r, c]
            gxm += g[r, c] * xhat[r, c]
        gm /= cols
        gxm /= cols
        for c in range(cols):
            out[r, c] = inv_std[r] * (g[r, c] - gm - xhat[r, c] * gxm)
    return out


@njit(cache=True)
def adam_step(p, g, m, v, lr, beta1, beta2, eps, b1corr, b2corr):
    n = p.shape[0]
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = m[i] / b1corr
        vhat = v[i] / b2corr
        p[i] -= lr * mhat / (np.sqrt(vhat) + eps)


@njit(cache=True)
def scatter_add_rows(out, ids, g):
    n, cols = g.shape
    for i in range(n):
        row = ids[i]
        for c in range(cols):
            out[row, c] += g[i, c]
