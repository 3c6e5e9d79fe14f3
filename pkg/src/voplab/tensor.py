"""Dense tensors with a reverse-mode gradient tape.

Only leading-batch broadcasting is supported: an operand may be combined
with another whose shape is a suffix of its own (e.g. a ``(D,)`` bias onto a
``(B, L, D)`` activation). Everything else must match exactly.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from . import kernels

MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, op={self.op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _suffix_compatible(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if _suffix_compatible(a.shape, b.shape):
        return a.shape
    if _suffix_compatible(b.shape, a.shape):
        return b.shape
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    if b.ndim > 0 and a.ndim > 0:
        _broadcast_shape(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    if b.ndim > 0 and a.ndim > 0:
        _broadcast_shape(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out_data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if b.ndim > 0 and a.ndim > 0:
        _broadcast_shape(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), bw, "mul")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(x: Tensor) -> Tensor:
    y = kernels.gelu_fwd(x.data)
    return _make(y, (x,), lambda g: (kernels.gelu_bwd(x.data, g),), "gelu")


def clip_max(x: Tensor, hi: float) -> Tensor:
    """min(x, hi); gradient passes only where x < hi."""
    y = np.minimum(x.data, hi)
    keep = (x.data < hi).astype(x.dtype)
    return _make(y, (x,), lambda g: (g * keep,), "clip_max")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; ``b`` may be 2-D and shared across ``a``'s batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        out_data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out_data = a.data @ b.data

    def bw(g):
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out_data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from exc
    return _make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    y = np.transpose(x.data, axes)
    return _make(y, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if not _suffix_compatible(shape, x.shape):
        raise ShapeError(f"broadcast_to: {x.shape} is not a suffix of {shape}")
    y = np.broadcast_to(x.data, shape)
    return _make(y, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[tt.shape for tt in tensors]} along axis {axis}"
            )
    y = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(y, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    y = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % y.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(y, tensors, bw, "stack")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not (0 <= start <= stop <= x.shape[ax]):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    y = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(y, (x,), bw, "slice")


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """x[..., index, ...] dropping the axis."""
    ax = axis % x.ndim
    y = slice_axis(x, ax, index, index + 1)
    return reshape(y, x.shape[:ax] + x.shape[ax + 1:])


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[b, index[b]]`` for a (B, L, D) tensor -> (B, D)."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: need (B,L,D) and (B,), got {x.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeError(f"gather_rows: index out of range for length {x.shape[1]}")
    rows = np.arange(x.shape[0])
    y = x.data[rows, index]

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[rows, index] = g
        return (full,)

    return _make(y, (x,), bw, "gather_rows")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for vocabulary {table.shape[0]}")
    y = table.data[ids]

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(y, (table,), bw, "embedding")


def diagonal(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diagonal: need a square matrix, got {x.shape}")
    n = x.shape[0]
    y = np.diagonal(x.data).copy()

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return _make(y, (x,), bw, "diagonal")


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes)

    def bw(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over axes {axes} of {x.shape}")
    y = x.data.mean(axis=axes)
    scale = x.dtype.type(1.0 / count)

    def bw(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g * scale, x.shape).copy(),)

    return _make(np.asarray(y, dtype=x.dtype), (x,), bw, "mean")


# ---------------------------------------------------------------- row kernels

def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    if ax != x.ndim - 1:
        perm = [i for i in range(x.ndim) if i != ax] + [ax]
        inv = list(np.argsort(perm))
        return transpose(softmax(transpose(x, perm), -1), inv)
    y = kernels.softmax_fwd(_rows(x.data)).reshape(x.shape)

    def bw(g):
        return (kernels.softmax_bwd(_rows(y), _rows(g)).reshape(x.shape),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    m = x.data.max(axis=ax, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    y = shifted - lse

    def bw(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {width}")
    y, xhat, rstd = kernels.layernorm_fwd(_rows(x.data), gain.data, bias.data, eps)

    def bw(g):
        dx, dg, db = kernels.layernorm_bwd(_rows(g), xhat, rstd, gain.data)
        return dx.reshape(x.shape), dg.astype(gain.dtype), db.astype(bias.dtype)

    return _make(y.reshape(x.shape), (x, gain, bias), bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    norm = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero-norm vector encountered")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=ax, keepdims=True)) / norm,)

    return _make(y, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------- tape

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) to every leaf that requires gradients.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned keyed by
    ``id(leaf)``. The tape is consumed: interior nodes drop their parents.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                leaves[id(node)] = node
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is None:
            node._parents, node._backward = (), None
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents, node._backward = (), None
    return {k: leaf.grad for k, leaf in leaves.items()}


def parameters_with_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.grad is not None]
