"""Named parameter groups with per-group trainability."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import Tensor


@dataclass
class ParameterGroup:
    name: str
    shape: tuple[int, ...]
    tensor: Tensor | None
    trainable: bool = False
    init: str = "zeros"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


def _name_seed(seed: int, name: str) -> list[int]:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]


def init_array(kind: str, shape: tuple[int, ...], seed: int, name: str, dtype) -> np.ndarray:
    """Deterministic init keyed by (seed, name), so a group's initial value
    does not depend on which other groups exist."""
    rng = np.random.default_rng(_name_seed(seed, name))
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "ones":
        return np.ones(shape, dtype=dtype)
    if kind.startswith("normal:"):
        std = float(kind.split(":", 1)[1])
        return (rng.standard_normal(shape) * std).astype(dtype)
    if kind == "fan_in":
        fan_in = shape[0] if len(shape) >= 1 else 1
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
    if kind.startswith("uniform:"):
        bound = float(kind.split(":", 1)[1])
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if kind.startswith("const:"):
        return np.full(shape, float(kind.split(":", 1)[1]), dtype=dtype)
    raise ValueError(f"unknown init kind {kind!r}")


class ParameterRegistry:
    """Ordered, uniquely-named collection of parameter groups.

    With ``materialize=False`` only shapes are recorded; this is how models at
    full CLIP size are walked for parameter accounting without allocating them.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, materialize: bool = True):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.materialize = materialize
        self._groups: dict[str, ParameterGroup] = {}

    def create(self, name: str, shape, init: str = "zeros") -> Tensor | None:
        if name in self._groups:
            raise KeyError(f"duplicate parameter group name {name!r}")
        shape = tuple(int(s) for s in shape)
        tensor = None
        if self.materialize:
            tensor = Tensor(init_array(init, shape, self.seed, name, self.dtype), name=name)
        self._groups[name] = ParameterGroup(name, shape, tensor, False, init)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._groups

    def __getitem__(self, name: str) -> ParameterGroup:
        return self._groups[name]

    def __iter__(self) -> Iterator[ParameterGroup]:
        return iter(self._groups.values())

    def __len__(self) -> int:
        return len(self._groups)

    def names(self) -> list[str]:
        return list(self._groups)

    def tensor(self, name: str) -> Tensor:
        t = self._groups[name].tensor
        if t is None:
            raise RuntimeError("registry was built without materialized tensors")
        return t

    def set_trainable(self, mask: dict[str, bool]) -> None:
        missing = set(self._groups) - set(mask)
        if missing:
            raise KeyError(f"trainability mask misses groups: {sorted(missing)[:5]}")
        unknown = set(mask) - set(self._groups)
        if unknown:
            raise KeyError(f"trainability mask names unknown groups: {sorted(unknown)[:5]}")
        for name, flag in mask.items():
            g = self._groups[name]
            g.trainable = bool(flag)
            if g.tensor is not None:
                g.tensor.requires_grad = bool(flag)

    def mask(self) -> dict[str, bool]:
        return {g.name: g.trainable for g in self}

    def trainable(self) -> list[ParameterGroup]:
        return [g for g in self if g.trainable]

    def total(self) -> int:
        return sum(g.size for g in self)

    def zero_grad(self) -> None:
        for g in self:
            if g.tensor is not None:
                g.tensor.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {g.name: g.tensor.data.copy() for g in self}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True,
                   only: Callable[[str], bool] | None = None) -> list[str]:
        loaded = []
        for name, arr in state.items():
            if only is not None and not only(name):
                continue
            if name not in self._groups:
                if strict:
                    raise KeyError(f"unknown parameter group {name!r} in state")
                continue
            g = self._groups[name]
            if tuple(arr.shape) != g.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {g.shape}")
            g.tensor.data = np.array(arr, dtype=self.dtype)
            loaded.append(name)
        return loaded

    def astype(self, dtype) -> None:
        """Cast every materialized group in place (used for double-precision checks)."""
        self.dtype = np.dtype(dtype)
        for g in self:
            if g.tensor is not None:
                g.tensor.data = g.tensor.data.astype(dtype)
                g.tensor.grad = None


@dataclass
class ParameterSnapshot:
    values: dict[str, bytes] = field(default_factory=dict)

    @classmethod
    def take(cls, registry: ParameterRegistry) -> "ParameterSnapshot":
        return cls({g.name: g.tensor.data.tobytes() for g in registry})

    def changed(self, registry: ParameterRegistry) -> list[str]:
        return [g.name for g in registry if g.tensor.data.tobytes() != self.values[g.name]]
