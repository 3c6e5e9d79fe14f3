"""Pre-LN transformer building blocks registered into a ParameterRegistry."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParameterRegistry
from .tensor import Tensor


class Linear:
    def __init__(self, reg: ParameterRegistry, prefix: str, d_in: int, d_out: int,
                 bias: bool = True, init: str = "fan_in", bias_init: str = "zeros"):
        self.reg = reg
        self.weight_name = f"{prefix}.weight"
        self.bias_name = f"{prefix}.bias" if bias else None
        reg.create(self.weight_name, (d_in, d_out), init)
        if bias:
            reg.create(self.bias_name, (d_out,), bias_init)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.reg.tensor(self.weight_name))
        if self.bias_name is not None:
            y = y + self.reg.tensor(self.bias_name)
        return y


class LayerNorm:
    def __init__(self, reg: ParameterRegistry, prefix: str, width: int):
        self.reg = reg
        self.gain_name = f"{prefix}.weight"
        self.bias_name = f"{prefix}.bias"
        reg.create(self.gain_name, (width,), "ones")
        reg.create(self.bias_name, (width,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.reg.tensor(self.gain_name), self.reg.tensor(self.bias_name))


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: position q may attend to k <= q."""
    m = np.triu(np.full((length, length), T.MASK_VALUE, dtype=dtype), k=1)
    return m


class MultiHeadAttention:
    def __init__(self, reg: ParameterRegistry, prefix: str, width: int, heads: int):
        self.width, self.heads = width, heads
        self.in_proj = Linear(reg, f"{prefix}.in_proj", width, 3 * width)
        self.out_proj = Linear(reg, f"{prefix}.out_proj", width, width)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, L, D = x.shape
        H = self.heads
        dh = D // H
        qkv = self.in_proj(x)

        def heads(t):
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(T.slice_axis(qkv, -1, 0, D))
        k = heads(T.slice_axis(qkv, -1, D, 2 * D))
        v = heads(T.slice_axis(qkv, -1, 2 * D, 3 * D))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + Tensor(mask.astype(scores.dtype))
        att = T.softmax(scores, axis=-1)
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, D)
        return self.out_proj(out)


class Adapter:
    """Bottleneck down -> GELU -> up, up-projection zero-initialized."""

    def __init__(self, reg: ParameterRegistry, prefix: str, width: int, hidden: int):
        self.down = Linear(reg, f"{prefix}.down", width, hidden)
        self.up = Linear(reg, f"{prefix}.up", hidden, width, init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return self.up(T.gelu(self.down(x)))


class ResidualBlock:
    """x + MHSA(LN(x)) then x + MLP(LN(x)), with optional parallel adapters."""

    def __init__(self, reg: ParameterRegistry, prefix: str, width: int, heads: int,
                 mlp_ratio: int = 4):
        self.reg = reg
        self.prefix = prefix
        self.width = width
        self.ln_1 = LayerNorm(reg, f"{prefix}.ln_1", width)
        self.attn = MultiHeadAttention(reg, f"{prefix}.attn", width, heads)
        self.ln_2 = LayerNorm(reg, f"{prefix}.ln_2", width)
        self.c_fc = Linear(reg, f"{prefix}.mlp.c_fc", width, width * mlp_ratio)
        self.c_proj = Linear(reg, f"{prefix}.mlp.c_proj", width * mlp_ratio, width)
        self.adapter_attn: Adapter | None = None
        self.adapter_ffn: Adapter | None = None

    def add_adapter(self, where: str, hidden: int) -> None:
        adapter = Adapter(self.reg, f"{self.prefix}.adapter_{where}", self.width, hidden)
        setattr(self, f"adapter_{where}", adapter)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln_1(x)
        a = self.attn(h, mask)
        if self.adapter_attn is not None:
            a = a + self.adapter_attn(h)
        x = x + a
        h = self.ln_2(x)
        f = self.c_proj(T.gelu(self.c_fc(h)))
        if self.adapter_ffn is not None:
            f = f + self.adapter_ffn(h)
        return x + f
