"""Symmetric contrastive training: loss, AdamW, cosine schedule, loop, lr search."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .corpus import Corpus, Split
from .encoders import DualEncoder
from .retrieval import evaluate
from .tensor import Tensor


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, batch_id: str, value: float):
        super().__init__(f"non-finite loss {value} at step {step} (batch {batch_id})")
        self.step, self.batch_id, self.value = step, batch_id, value


def contrastive_loss(S: Tensor, logit_scale=1.0) -> Tensor:
    """Mean of the row-wise and column-wise cross-entropies of ``scale * S`` against the diagonal."""
    S = T.as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise T.ShapeError(f"contrastive_loss: similarity must be square, got {S.shape}")
    logits = S * logit_scale
    rows = T.diagonal(T.log_softmax(logits, axis=1))
    cols = T.diagonal(T.log_softmax(logits, axis=0))
    return T.mean(rows + cols) * -0.5


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Decoupled weight decay Adam over the registry's trainable groups.

    Groups that received no gradient in a step are left untouched (no decay,
    no moment update), which keeps unused prompt blocks bitwise fixed.
    """

    def __init__(self, registry, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.2):
        self.registry = registry
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.names = [g.name for g in registry.trainable()]
        self.m = {n: np.zeros(registry[n].shape, dtype=registry.dtype) for n in self.names}
        self.v = {n: np.zeros(registry[n].shape, dtype=registry.dtype) for n in self.names}
        self.t = {n: 0 for n in self.names}

    def step(self, lr: float | None = None) -> list[str]:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        updated = []
        for n in self.names:
            p = self.registry.tensor(n)
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype
            self.t[n] += 1
            t = self.t[n]
            m, v = self.m[n], self.v[n]
            m *= dt.type(b1)
            m += dt.type(1 - b1) * g
            v *= dt.type(b2)
            v += dt.type(1 - b2) * g * g
            mhat = m / dt.type(1 - b1 ** t)
            vhat = v / dt.type(1 - b2 ** t)
            data = p.data * dt.type(1 - lr * self.weight_decay)
            p.data = (data - dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(self.eps))).astype(dt)
            updated.append(n)
        return updated

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": dict(self.t)}

    def load_state(self, state: dict) -> None:
        if set(state["t"]) != set(self.names):
            raise ValueError("optimizer state does not match the trainable groups")
        for n in self.names:
            self.m[n] = np.array(state["m"][n], dtype=self.registry.dtype)
            self.v[n] = np.array(state["v"][n], dtype=self.registry.dtype)
            self.t[n] = int(state["t"][n])


def model_loss(model: DualEncoder, split: Split, idx, cfg: TrainConfig) -> Tensor:
    S = model.similarity(split.text.take(idx), split.video.take(idx))
    return contrastive_loss(S, model.logit_scale(cfg.logit_scale_max))


def similarity_matrix(model: DualEncoder, split: Split, batch_size: int = 64) -> np.ndarray:
    """Full text x video cosine grid of a split, computed without a tape."""
    with T.no_grad():
        zt, zv = [], []
        for s in range(0, len(split), batch_size):
            idx = np.arange(s, min(s + batch_size, len(split)))
            zt.append(model.encode_text(split.text.take(idx)).data)
            zv.append(model.encode_video(split.video.take(idx)).data)
        zt = np.concatenate(zt).astype(np.float64)
        zv = np.concatenate(zv).astype(np.float64)
    nt = np.linalg.norm(zt, axis=1, keepdims=True)
    nv = np.linalg.norm(zv, axis=1, keepdims=True)
    if (nt == 0).any() or (nv == 0).any():
        raise ValueError("zero-norm embedding in evaluation")
    return (zt / nt) @ (zv / nv).T


def evaluate_split(model: DualEncoder, split: Split) -> dict[str, float]:
    reports = evaluate(similarity_matrix(model, split))
    row = {}
    for rep in reports.values():
        row.update(rep.as_row())
    return row


@dataclass
class TrainState:
    """Everything needed to continue a run from a step boundary."""
    step: int = 0
    rng_state: dict | None = None  # generator state at the start of the current epoch
    optimizer: dict | None = None


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    final_val: dict[str, float] | None = None
    state: TrainState | None = None
    stopped_early: bool = False


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(model: DualEncoder, corpus: Corpus, cfg: TrainConfig, resume: TrainState | None = None,
          stop_after: int | None = None, on_checkpoint: Callable[[TrainState, list], None] | None = None,
          log_path=None, validate: bool = True) -> TrainResult:
    """Run (or continue) a training job.

    ``stop_after`` ends the run after that many global steps, which together with
    ``resume`` lets tests split one run in two. ``on_checkpoint`` is called at every
    epoch boundary except the last. Log records are deterministic and carry no
    wall-clock data.
    """
    train_split = corpus["train"]
    val_split = corpus.splits.get("val")
    n = len(train_split)
    per_epoch = steps_per_epoch(n, cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    opt = AdamW(model.registry, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    if resume is not None:
        step = resume.step
        if resume.optimizer is not None:
            opt.load_state(resume.optimizer)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
    result = TrainResult()
    log_fh = open(log_path, "a") if log_path is not None else None

    def emit(rec):
        result.log.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

    try:
        epoch = step // per_epoch
        while step < total:
            epoch_rng_state = rng.bit_generator.state
            perm = rng.permutation(n)
            first = step - epoch * per_epoch
            losses = []
            for b in range(first, per_epoch):
                if step >= total or (stop_after is not None and step >= stop_after):
                    break
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                lr = cosine_lr(step, total, cfg.lr)
                model.registry.zero_grad()
                loss = model_loss(model, train_split, idx, cfg)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteLoss(step, f"epoch{epoch}/batch{b}", value)
                T.backward(loss)
                opt.step(lr)
                step += 1
                losses.append(value)
                emit({"kind": "step", "step": step, "epoch": epoch, "batch": b,
                      "loss": value, "lr": lr})
            epoch_done = step == min(total, (epoch + 1) * per_epoch)
            if not epoch_done:
                result.stopped_early = True
                result.state = TrainState(step, epoch_rng_state, opt.state())
                return result
            rec = {"kind": "epoch", "epoch": epoch, "step": step}
            if validate and val_split is not None and len(val_split) >= 2:
                rec["val"] = evaluate_split(model, val_split)
                result.final_val = rec["val"]
            emit(rec)
            epoch += 1
            if on_checkpoint is not None and step < total:
                on_checkpoint(TrainState(step, rng.bit_generator.state, opt.state()), result.log)
        result.state = TrainState(step, rng.bit_generator.state, opt.state())
        return result
    finally:
        if log_fh is not None:
            log_fh.close()


def lr_search(build: Callable[[], DualEncoder], corpus: Corpus, cfg: TrainConfig,
              grid=None, metric: str = "t2v_R@1") -> tuple[float, list[dict]]:
    """Train one fresh model per grid point; pick the best final validation ``metric``.

    Ties go to the earlier grid entry.
    """
    grid = tuple(grid or cfg.lr_grid or (1e-6, 1e-5, 1e-4, 1e-3, 1e-2))
    rows = []
    best_lr, best = None, -math.inf
    for lr in grid:
        run_cfg = TrainConfig(**{**cfg.to_dict(), "lr": lr, "lr_grid": ()})
        res = train(build(), corpus, run_cfg)
        score = res.final_val[metric] if res.final_val else -math.inf
        rows.append({"lr": lr, metric: score, "val": res.final_val})
        if best_lr is None or score > best:
            best_lr, best = lr, score
    return best_lr, rows


def load_backbone(model: DualEncoder, state: dict[str, np.ndarray]) -> list[str]:
    """Copy backbone groups (everything except prompts and adapters) from ``state``."""
    return model.registry.load_state(
        state, strict=False,
        only=lambda n: not n.startswith("prompts.") and ".adapter_" not in n)


def write_log(path, records) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
