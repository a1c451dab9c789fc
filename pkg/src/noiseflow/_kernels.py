"""Fused per-pixel loops for the affine coupling inverse and its gradient.

The numpy path in :mod:`noiseflow.layers` materialises several
``(pixels, hidden)`` temporaries per call; these loops keep the hidden
activations in a small scratch buffer instead. Both paths must agree to
rounding error (see ``tests/test_layers.py``).
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def coupling_inverse(y, ia, ib, w1, c1, w2, c2, clamp, x, a_out):
    n_pix = y.shape[0]
    half = ia.shape[0]
    hidden = w1.shape[1]
    h = np.empty(hidden)
    for p in range(n_pix):
        for k in range(hidden):
            s = c1[k]
            for j in range(half):
                s += y[p, ib[j]] * w1[j, k]
            h[k] = s if s > 0.0 else 0.0
        for j in range(half):
            ra = c2[j]
            rb = c2[half + j]
            for k in range(hidden):
                ra += h[k] * w2[k, j]
                rb += h[k] * w2[k, half + j]
            if clamp > 0.0:
                ra = clamp * math.tanh(ra / clamp)
            a_out[p, j] = ra
            x[p, ia[j]] = (y[p, ia[j]] - rb) * math.exp(-ra)
            x[p, ib[j]] = y[p, ib[j]]


@njit(cache=True)
def coupling_backward(y, x, a, gx, gld, ia, ib, w1, c1, w2, clamp, gy, gw1, gc1, gw2, gc2):
    n_pix = y.shape[0]
    half = ia.shape[0]
    hidden = w1.shape[1]
    channels = w2.shape[1]
    pre = np.empty(hidden)
    gout = np.empty(channels)
    gyb = np.empty(half)
    for p in range(n_pix):
        for k in range(hidden):
            s = c1[k]
            for j in range(half):
                s += y[p, ib[j]] * w1[j, k]
            pre[k] = s
        for j in range(half):
            ea = math.exp(-a[p, j])
            gxa = gx[p, ia[j]]
            ga = -gxa * x[p, ia[j]] - gld[p]
            if clamp > 0.0:
                t = a[p, j] / clamp
                ga *= 1.0 - t * t
            gout[j] = ga
            gout[half + j] = -gxa * ea
            gy[p, ia[j]] = gxa * ea
            gyb[j] = 0.0
        for c in range(channels):
            gc2[c] += gout[c]
        for k in range(hidden):
            if pre[k] <= 0.0:
                continue
            gh = 0.0
            for c in range(channels):
                gw2[k, c] += pre[k] * gout[c]
                gh += gout[c] * w2[k, c]
            gc1[k] += gh
            for j in range(half):
                gw1[j, k] += y[p, ib[j]] * gh
                gyb[j] += gh * w1[j, k]
        for j in range(half):
            gy[p, ib[j]] = gx[p, ib[j]] + gyb[j]
