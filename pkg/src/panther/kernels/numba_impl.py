"""Numba-compiled twins of the numpy kernels.

Loops are written scatter-free and single-threaded so results are
deterministic run to run; fastmath stays off to keep numerics close to
the numpy path.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv1d_depthwise_fwd(x, kern, dilation):
    B, T, C = x.shape
    w = kern.shape[0]
    y = np.zeros_like(x)
    for b in range(B):
        for t in range(T):
            for k in range(w):
                s = t - (w - 1 - k) * dilation
                if s >= 0:
                    for c in range(C):
                        y[b, t, c] += kern[k, c] * x[b, s, c]
    return y


@njit(cache=True)
def conv1d_depthwise_bwd(x, kern, dilation, gy):
    B, T, C = x.shape
    w = kern.shape[0]
    gx = np.zeros_like(x)
    gk = np.zeros_like(kern)
    for b in range(B):
        for t in range(T):
            for k in range(w):
                s = t - (w - 1 - k) * dilation
                if s >= 0:
                    for c in range(C):
                        gx[b, s, c] += kern[k, c] * gy[b, t, c]
                        gk[k, c] += gy[b, t, c] * x[b, s, c]
    return gx, gk


@njit(cache=True)
def scatter_add_rows(out, ids, rows):
    n, d = rows.shape
    for i in range(n):
        row = ids[i]
        for c in range(d):
            out[row, c] += rows[i, c]


@njit(cache=True)
def softmax_rows(x):
    n, m = x.shape
    y = np.empty_like(x)
    for i in range(n):
        hi = x[i, 0]
        for j in range(1, m):
            if x[i, j] > hi:
                hi = x[i, j]
        tot = 0.0
        for j in range(m):
            e = np.exp(x[i, j] - hi)
            y[i, j] = e
            tot += e
        for j in range(m):
            y[i, j] /= tot
    return y


@njit(cache=True)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.size):
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * gf[i]
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * gf[i] * gf[i]
        pf[i] -= lr * (mf[i] / c1) / (np.sqrt(vf[i] / c2) + eps)
