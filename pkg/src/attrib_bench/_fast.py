"""Numba-compiled inner loops for the few kernels where numpy temporaries
dominate the runtime (2x2 max pooling and relu backward masking).

All functions operate on (M, H, W) stacks where M = batch * channels; IEEE
f64 semantics (no fastmath), so results are bit-identical to the plain
numpy formulations they replace.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def pool_max(x):
    m, h, w = x.shape
    h2, w2 = h // 2, w // 2
    out = np.empty((m, h2, w2))
    for ci in range(m):
        for a in range(h2):
            for b in range(w2):
                v0 = x[ci, 2 * a, 2 * b]
                v1 = x[ci, 2 * a, 2 * b + 1]
                v2 = x[ci, 2 * a + 1, 2 * b]
                v3 = x[ci, 2 * a + 1, 2 * b + 1]
                best = v0
                if v1 > best:
                    best = v1
                if v2 > best:
                    best = v2
                if v3 > best:
                    best = v3
                out[ci, a, b] = best
    return out


@njit(cache=True)
def pool_max_argmax(x):
    """Window-local argmax in row-major window order (first max wins ties)."""
    m, h, w = x.shape
    h2, w2 = h // 2, w // 2
    out = np.empty((m, h2, w2))
    am = np.empty((m, h2, w2), dtype=np.int8)
    for ci in range(m):
        for a in range(h2):
            for b in range(w2):
                v0 = x[ci, 2 * a, 2 * b]
                v1 = x[ci, 2 * a, 2 * b + 1]
                v2 = x[ci, 2 * a + 1, 2 * b]
                v3 = x[ci, 2 * a + 1, 2 * b + 1]
                best = v0
                k = 0
                if v1 > best:
                    best = v1
                    k = 1
                if v2 > best:
                    best = v2
                    k = 2
                if v3 > best:
                    best = v3
                    k = 3
                out[ci, a, b] = best
                am[ci, a, b] = k
    return out, am


@njit(cache=True)
def pool_scatter(gy, am):
    m, h2, w2 = gy.shape
    gx = np.zeros((m, h2 * 2, w2 * 2))
    for ci in range(m):
        for a in range(h2):
            for b in range(w2):
                k = am[ci, a, b]
                gx[ci, 2 * a + (k >> 1), 2 * b + (k & 1)] = gy[ci, a, b]
    return gx


@njit(cache=True)
def col2im_add(gcols, k, stride, gxp):
    """Scatter a (C*k*k, ho*wo) patch-gradient matrix into a padded input
    gradient (C, Hp, Wp); inverse of the im2col gather."""
    c, hp, wp = gxp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                row = (ci * k + i) * k + j
                idx = 0
                for a in range(ho):
                    sr = a * stride + i
                    for b in range(wo):
                        gxp[ci, sr, b * stride + j] += gcols[row, idx]
                        idx += 1
    return gxp


@njit(cache=True)
def relu_backward(g, x, guided):
    """g * (x > 0), additionally masked by (g > 0) when guided."""
    out = np.zeros_like(g)
    for i in range(g.size):
        gi = g[i]
        if x[i] > 0.0 and (not guided or gi > 0.0):
            out[i] = gi
    return out


def warmup():
    """Trigger JIT compilation (cached on disk after the first run)."""
    x = np.zeros((1, 4, 4))
    pool_max(x)
    out, am = pool_max_argmax(x)
    pool_scatter(out, am)
    relu_backward(np.zeros(4), np.zeros(4), False)
    col2im_add(np.zeros((9, 4)), 3, 1, np.zeros((1, 4, 4)))
