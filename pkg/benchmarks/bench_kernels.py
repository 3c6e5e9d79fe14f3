"""Numba vs numpy timings for the hot kernels and for one toy training step.

    python benchmarks/bench_kernels.py [--repeat N] [--rows R] [--width W]

Each kernel is run on both backends, outputs are compared, and the median
wall time of ``--repeat`` calls is reported. JIT compilation happens in a
warm-up call and is excluded.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from voplab import kernels
from voplab import tensor as T
from voplab.config import ModelSpec, PromptSpec, Protocol, TrainConfig
from voplab.encoders import DualEncoder, TextBatch, VideoBatch
from voplab.protocols import apply_protocol
from voplab.trainer import contrastive_loss


def median_ms(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def kernel_cases(rows: int, width: int, rng):
    x = rng.standard_normal((rows, width)).astype(np.float32)
    dy = rng.standard_normal((rows, width)).astype(np.float32)
    gain = rng.standard_normal(width).astype(np.float32)
    bias = rng.standard_normal(width).astype(np.float32)
    _, xhat, rstd = kernels.np_layernorm_fwd(x, gain, bias, 1e-5)
    y = kernels.np_softmax_fwd(x)
    hidden = rng.standard_normal((rows, 4 * width)).astype(np.float32)
    dh = rng.standard_normal((rows, 4 * width)).astype(np.float32)
    return {
        "layernorm_fwd": lambda: kernels.layernorm_fwd(x, gain, bias, 1e-5),
        "layernorm_bwd": lambda: kernels.layernorm_bwd(dy, xhat, rstd, gain),
        "softmax_fwd": lambda: kernels.softmax_fwd(x),
        "softmax_bwd": lambda: kernels.softmax_bwd(y, dy),
        "gelu_fwd": lambda: kernels.gelu_fwd(hidden),
        "gelu_bwd": lambda: kernels.gelu_bwd(hidden, dh),
    }


def toy_step():
    spec = ModelSpec()
    rng = np.random.default_rng(0)
    tb = TextBatch(rng.integers(0, spec.vocab, (32, spec.N_max)), rng.integers(1, spec.N_max, 32))
    vb = VideoBatch(rng.standard_normal((32, spec.F, 3, spec.image_side, spec.image_side)).astype(np.float32))
    m = DualEncoder(spec)
    apply_protocol(m, Protocol("vop"), PromptSpec())

    def step():
        m.registry.zero_grad()
        T.backward(contrastive_loss(m.similarity(tb, vb), m.logit_scale(TrainConfig().logit_scale_max)))

    return step


def _flat(out):
    return np.concatenate([np.ravel(o) for o in out]) if isinstance(out, tuple) else np.ravel(out)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--rows", type=int, default=4096, help="token rows per kernel call")
    ap.add_argument("--width", type=int, default=48)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    cases = kernel_cases(args.rows, args.width, rng)
    cases["toy train step (B=32)"] = toy_step()
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, fn in cases.items():
        res, outs = {}, {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            outs[backend] = fn()
            res[backend] = median_ms(fn, args.repeat if "step" not in name else max(3, args.repeat // 10))
        if outs["numpy"] is not None:
            diff = float(np.max(np.abs(_flat(outs["numpy"]) - _flat(outs["numba"]))))
            diff_s = f"{diff:.2e}"
        else:
            diff_s = "-"
        print(f"{name:<24}{res['numpy']:>10.3f}{res['numba']:>10.3f}"
              f"{res['numpy'] / res['numba']:>8.2f}x{diff_s:>12}")


if __name__ == "__main__":
    main()
