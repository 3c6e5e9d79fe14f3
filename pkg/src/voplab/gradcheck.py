"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class CoordCheck:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class CheckReport:
    entries: list[CoordCheck] = field(default_factory=list)
    nonfinite: list[str] = field(default_factory=list)
    precision: str = "single"
    epsilon: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        if not self.entries:
            return 0.0
        return max(e.rel_error for e in self.entries)

    @property
    def ok(self) -> bool:
        return not self.nonfinite

    def passed(self, tol: float) -> bool:
        return self.ok and self.max_rel_error < tol

    def worst(self, n: int = 5) -> list[CoordCheck]:
        return sorted(self.entries, key=lambda e: -e.rel_error)[:n]


def _sample_coords(params: Sequence[Tensor], n_coords: int, rng) -> list[tuple[int, int]]:
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    if n_coords >= total:
        return [(pi, j) for pi, s in enumerate(sizes) for j in range(s)]
    # a couple of coordinates from every tensor, the rest uniformly at random
    picks: set[tuple[int, int]] = set()
    per = max(1, min(2, n_coords // max(1, len(params))))
    for pi, s in enumerate(sizes):
        for j in rng.choice(s, size=min(per, s), replace=False):
            picks.add((pi, int(j)))
    offsets = np.cumsum([0] + sizes)
    while len(picks) < n_coords:
        flat = int(rng.integers(total))
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        picks.add((pi, flat - int(offsets[pi])))
    return sorted(picks)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-4,
    n_coords: int = 200,
    seed: int = 0,
    floor: float | None = None,
) -> CheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must read ``params`` (by reference) and return a scalar tensor.
    Analytic gradients are taken at the parameters' own precision; the
    numeric side always evaluates in float64 so single-precision checks are
    not dominated by finite-difference cancellation. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    precision = "double" if all(p.dtype == np.float64 for p in params) else "single"
    if floor is None:
        floor = 1e-6 if precision == "double" else 1e-4
    report = CheckReport(precision=precision, epsilon=epsilon)

    for p in params:
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        report.nonfinite.append("loss")
        return report
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    coords = _sample_coords(params, n_coords, rng)
    originals = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        with no_grad():
            for pi, j in coords:
                p = params[pi]
                flat = p.data.reshape(-1)
                base = flat[j]
                flat[j] = base + epsilon
                fp = float(fn().data)
                flat[j] = base - epsilon
                fm = float(fn().data)
                flat[j] = base
                num = (fp - fm) / (2 * epsilon)
                ana = float(analytic[pi].reshape(-1)[j])
                label = p.name or f"param{pi}"
                if not (np.isfinite(num) and np.isfinite(ana)):
                    report.nonfinite.append(f"{label}[{j}]")
                    continue
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                report.entries.append(CoordCheck(label, j, ana, num, rel))
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return report
