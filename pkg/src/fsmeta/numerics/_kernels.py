"""Compiled inner loops for the memory-bound ops (pooling, batch norm).

Sums accumulate in float64 regardless of the array dtype, in a fixed loop
order, so results are deterministic.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def pool_forward(x):
    a, b, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((a, b, ho, wo), x.dtype)
    code = np.empty((a, b, ho, wo), np.uint8)
    for i in range(a):
        for j in range(b):
            for y in range(ho):
                for z in range(wo):
                    # strict '>' keeps the first maximum in row-major order
                    m = x[i, j, 2 * y, 2 * z]
                    k = 0
                    v = x[i, j, 2 * y, 2 * z + 1]
                    if v > m:
                        m = v
                        k = 1
                    v = x[i, j, 2 * y + 1, 2 * z]
                    if v > m:
                        m = v
                        k = 2
                    v = x[i, j, 2 * y + 1, 2 * z + 1]
                    if v > m:
                        m = v
                        k = 3
                    out[i, j, y, z] = m
                    code[i, j, y, z] = k
    return out, code


@njit(cache=True)
def pool_backward(g, code, h, w):
    a, b, ho, wo = g.shape
    gx = np.zeros((a, b, h, w), g.dtype)
    for i in range(a):
        for j in range(b):
            for y in range(ho):
                for z in range(wo):
                    k = code[i, j, y, z]
                    gx[i, j, 2 * y + k // 2, 2 * z + k % 2] = g[i, j, y, z]
    return gx


@njit(cache=True)
def bn_train_forward(x, gamma, beta, eps):
    """``x`` viewed as (A, C, B); statistics per C over A and B."""
    na, nc, nb = x.shape
    m = na * nb
    out = np.empty_like(x)
    mean = np.empty(nc, np.float64)
    var = np.empty(nc, np.float64)
    for c in range(nc):
        s = 0.0
        for a in range(na):
            for b in range(nb):
                s += x[a, c, b]
        mu = s / m
        ss = 0.0
        for a in range(na):
            for b in range(nb):
                d = x[a, c, b] - mu
                ss += d * d
        v = ss / m
        mean[c] = mu
        var[c] = v
        scale = gamma[c] / np.sqrt(v + eps)
        shift = beta[c]
        for a in range(na):
            for b in range(nb):
                out[a, c, b] = (x[a, c, b] - mu) * scale + shift
    return out, mean, var


@njit(cache=True)
def bn_train_backward(g, x, mean, var, gamma, eps, need_x):
    na, nc, nb = x.shape
    m = na * nb
    gx = np.empty_like(x) if need_x else np.empty((0, 0, 0), x.dtype)
    ggamma = np.empty(nc, np.float64)
    gbeta = np.empty(nc, np.float64)
    for c in range(nc):
        mu = mean[c]
        inv = 1.0 / np.sqrt(var[c] + eps)
        sg = 0.0
        sgx = 0.0
        for a in range(na):
            for b in range(nb):
                gv = g[a, c, b]
                sg += gv
                sgx += gv * (x[a, c, b] - mu)
        ggamma[c] = sgx * inv
        gbeta[c] = sg
        if need_x:
            k = gamma[c] * inv / m
            corr = sgx * inv * inv
            for a in range(na):
                for b in range(nb):
                    gx[a, c, b] = k * (m * g[a, c, b] - sg - (x[a, c, b] - mu) * corr)
    return gx, ggamma, gbeta
