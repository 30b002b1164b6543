"""Pure-numpy implementations of the hot inner kernels.

Reference backend: every function here has a numba twin in
``numba_backend`` with the same signature.  All arrays are C-contiguous
float64; 2-d kernels treat the leading axis as independent rows.
"""

import numpy as np

NAME = "numpy"


def softmax2d(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax2d(x, keep):
    """Row softmax over positions where ``keep`` is nonzero.

    Rows with no kept position come back as all zeros.
    """
    neg = np.where(keep, x, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(np.where(keep, x - m_safe, 0.0)), 0.0)
    s = e.sum(axis=1, keepdims=True)
    return np.where(s > 0.0, e / np.where(s > 0.0, s, 1.0), 0.0)


def softmax_backward2d(y, g):
    # d/dx softmax: y * (g - <y, g>) per row; also correct for masked rows
    # (zero rows stay zero).
    dot = (y * g).sum(axis=1, keepdims=True)
    return y * (g - dot)


def layernorm2d(x, eps):
    """Normalize each row to zero mean / unit variance.

    Returns (xhat, inv_std); gain and bias are applied by the caller.
    """
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv_std, inv_std[:, 0].copy()


def layernorm_backward2d(xhat, inv_std, g):
    gm = g.mean(axis=1, keepdims=True)
    gxm = (g * xhat).mean(axis=1, keepdims=True)
    return inv_std[:, None] * (g - gm - xhat * gxm)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, b1corr, b2corr):
    """Fused in-place Adam update on flat views.

    b1corr/b2corr are the bias corrections 1 - beta^t for the parameter's
    own step count.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / b1corr
    vhat = v / b2corr
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def scatter_add_rows(out, ids, g):
    """out[ids[i]] += g[i] for each row i (duplicate ids accumulate)."""
    np.add.at(out, ids, g)
