"""numba implementations of the kernels in :mod:`voplab.kernels`.

Imported on first use so that commands which never run a forward pass do not
pay for loading numba.
"""
import math

import numba
import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


@numba.njit(cache=True)
def nb_layernorm_fwd(x, gain, bias, eps):
    rows, width = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        s = 0.0
        for c in range(width):
            s += x[r, c]
        mean = s / width
        v = 0.0
        for c in range(width):
            d = x[r, c] - mean
            v += d * d
        inv = 1.0 / math.sqrt(v / width + eps)
        rstd[r] = inv
        for c in range(width):
            h = (x[r, c] - mean) * inv
            xhat[r, c] = h
            y[r, c] = h * gain[c] + bias[c]
    return y, xhat, rstd

@numba.njit(cache=True)
def nb_layernorm_bwd(dy, xhat, rstd, gain):
    rows, width = xhat.shape
    dx = np.empty_like(xhat)
    dgain = np.zeros(width, dtype=xhat.dtype)
    dbias = np.zeros(width, dtype=xhat.dtype)
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for c in range(width):
            g = dy[r, c] * gain[c]
            s1 += g
            s2 += g * xhat[r, c]
            dgain[c] += dy[r, c] * xhat[r, c]
            dbias[c] += dy[r, c]
        scale = rstd[r] / width
        for c in range(width):
            g = dy[r, c] * gain[c]
            dx[r, c] = (width * g - s1 - xhat[r, c] * s2) * scale
    return dx, dgain, dbias

@numba.njit(cache=True)
def nb_softmax_fwd(x):
    rows, width = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, width):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(width):
            e = math.exp(x[r, c] - m)
            y[r, c] = e
            s += e
        for c in range(width):
            y[r, c] /= s
    return y

@numba.njit(cache=True)
def nb_softmax_bwd(y, dy):
    rows, width = y.shape
    dx = np.empty_like(y)
    for r in range(rows):
        s = 0.0
        for c in range(width):
            s += dy[r, c] * y[r, c]
        for c in range(width):
            dx[r, c] = y[r, c] * (dy[r, c] - s)
    return dx

@numba.njit(cache=True)
def _nb_gelu_fwd_flat(x, out):
    for i in range(x.size):
        v = x[i]
        t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
        out[i] = 0.5 * v * (1.0 + t)

@numba.njit(cache=True)
def _nb_gelu_bwd_flat(x, dy, out):
    for i in range(x.size):
        v = x[i]
        t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        out[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)

def nb_gelu_fwd(x):
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    _nb_gelu_fwd_flat(flat, out)
    return out.reshape(x.shape)

def nb_gelu_bwd(x, dy):
    flat = np.ascontiguousarray(x).reshape(-1)
    g = np.ascontiguousarray(dy, dtype=flat.dtype).reshape(-1)
    out = np.empty_like(flat)
    _nb_gelu_bwd_flat(flat, g, out)
    return out.reshape(x.shape)
