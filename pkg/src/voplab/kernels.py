"""Hot elementwise/row kernels used by the autodiff ops.

Each kernel has a numba ``@njit`` implementation and a pure-numpy twin.
The numba path is used when numba imports and ``VOPLAB_NUMBA`` is not set
to ``0``. Both paths accept C-contiguous 2-D (rows, width) arrays for the
row kernels and arbitrary arrays for the elementwise ones.
"""
from __future__ import annotations

import math
import os

import numpy as np

import importlib.util

_GELU_C = math.sqrt(2.0 / math.pi)


def _env_wants_numba() -> bool:
    return os.environ.get("VOPLAB_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


HAVE_NUMBA = importlib.util.find_spec("numba") is not None
USE_NUMBA = HAVE_NUMBA and _env_wants_numba()
_nb = None


# ---------------------------------------------------------------- numpy path

def np_layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def np_layernorm_bwd(dy, xhat, rstd, gain):
    width = xhat.shape[1]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    term = width * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = term * (rstd[:, None] / width)
    return dx, dgain, dbias


def np_softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def np_gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def np_gelu_bwd(x, dy):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _pick(name):
    global _nb
    if USE_NUMBA:
        if _nb is None:
            from . import _nb_kernels
            _nb = _nb_kernels
        return getattr(_nb, "nb_" + name)
    return globals()["np_" + name]


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime ("numba" or "numpy")."""
    global USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    USE_NUMBA = name == "numba"


def layernorm_fwd(x, gain, bias, eps):
    x = np.ascontiguousarray(x)
    gain = np.ascontiguousarray(gain, dtype=x.dtype)
    bias = np.ascontiguousarray(bias, dtype=x.dtype)
    return _pick("layernorm_fwd")(x, gain, bias, x.dtype.type(eps))


def layernorm_bwd(dy, xhat, rstd, gain):
    dy = np.ascontiguousarray(dy, dtype=xhat.dtype)
    gain = np.ascontiguousarray(gain, dtype=xhat.dtype)
    return _pick("layernorm_bwd")(dy, xhat, rstd, gain)


def softmax_fwd(x):
    return _pick("softmax_fwd")(np.ascontiguousarray(x))


def softmax_bwd(y, dy):
    return _pick("softmax_bwd")(y, np.ascontiguousarray(dy, dtype=y.dtype))


def gelu_fwd(x):
    return _pick("gelu_fwd")(x)


def gelu_bwd(x, dy):
    return _pick("gelu_bwd")(x, dy)
