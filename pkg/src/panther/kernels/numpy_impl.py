"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in `numba_impl`; the two must agree
to float tolerance on all inputs. Keep these vectorized but simple — they
are the fallback path and the correctness reference for the benchmark.
"""

import numpy as np


def conv1d_depthwise_fwd(x, kern, dilation):
    """Causal depthwise dilated convolution.

    x: [B, T, C], kern: [w, C]. Output y[b,t,c] = sum_k kern[k,c] *
    x[b, t-(w-1-k)*dilation, c], reads before t=0 are zero.
    """
    w = kern.shape[0]
    y = np.zeros_like(x)
    for k in range(w):
        off = (w - 1 - k) * dilation
        if off == 0:
            y += kern[k] * x
        else:
            y[:, off:, :] += kern[k] * x[:, :-off, :]
    return y


def conv1d_depthwise_bwd(x, kern, dilation, gy):
    """Gradients of conv1d_depthwise_fwd w.r.t. input and kernel."""
    w = kern.shape[0]
    gx = np.zeros_like(x)
    gk = np.zeros_like(kern)
    for k in range(w):
        off = (w - 1 - k) * dilation
        if off == 0:
            gx += kern[k] * gy
            gk[k] = (gy * x).sum(axis=(0, 1))
        else:
            gx[:, :-off, :] += kern[k] * gy[:, off:, :]
            gk[k] = (gy[:, off:, :] * x[:, :-off, :]).sum(axis=(0, 1))
    return gx, gk


def scatter_add_rows(out, ids, rows):
    """out[ids[n]] += rows[n] for every n, with repeated ids accumulated."""
    np.add.at(out, ids, rows)


def softmax_rows(x):
    """Row softmax over the last axis of a 2-D array, max-shifted."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """One in-place Adam update with bias correction."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
