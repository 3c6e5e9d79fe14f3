"""CLIP-style text and vision towers, mean-pooled video embedding, cosine similarity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelSpec, PromptSpec
from .layers import LayerNorm, ResidualBlock, causal_mask
from .params import ParameterRegistry
from .prompts import PromptBank
from .tensor import Tensor


@dataclass
class TextBatch:
    token_ids: np.ndarray  # (B, N) int
    eos_index: np.ndarray  # (B,) int

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.eos_index = np.asarray(self.eos_index, dtype=np.int64)
        if self.token_ids.ndim != 2 or self.eos_index.shape != (self.token_ids.shape[0],):
            raise T.ShapeError(
                f"TextBatch: token_ids {self.token_ids.shape} / eos_index {self.eos_index.shape}")
        if (self.eos_index < 0).any() or (self.eos_index >= self.token_ids.shape[1]).any():
            raise ValueError("TextBatch: eos_index must lie in [0, N)")

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def take(self, idx) -> "TextBatch":
        return TextBatch(self.token_ids[idx], self.eos_index[idx])


@dataclass
class VideoBatch:
    frames: np.ndarray  # (B, F, 3, side, side)

    def __post_init__(self):
        if self.frames.ndim != 5 or self.frames.shape[2] != 3:
            raise T.ShapeError(f"VideoBatch: expected (B, F, 3, H, W), got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def take(self, idx) -> "VideoBatch":
        return VideoBatch(self.frames[idx])


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(B, F, 3, S, S) -> (B*F, M, 3*patch*patch), row-major over the patch grid."""
    B, F, C, S, _ = frames.shape
    g = S // patch
    x = frames.reshape(B * F, C, g, patch, g, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B * F, g * g, C * patch * patch))


def deep_sequence_length(F: int, P_v: int, M: int) -> int:
    """Token count entering a joint (inter-frame) layer: F [CLS] + P_v prompts + F*M patches."""
    return F + P_v + F * M


def _insert(stream: Tensor, prompts: Tensor, head: int) -> Tensor:
    return T.concat([T.slice_axis(stream, 1, 0, head), prompts,
                     T.slice_axis(stream, 1, head, stream.shape[1])], axis=1)


def _discard(out: Tensor, head: int, n_prompts: int) -> Tensor:
    return T.concat([T.slice_axis(out, 1, 0, head),
                     T.slice_axis(out, 1, head + n_prompts, out.shape[1])], axis=1)


class TextEncoder:
    def __init__(self, reg: ParameterRegistry, spec: ModelSpec):
        self.reg, self.spec = reg, spec
        reg.create("text.token_embedding", (spec.vocab, spec.d_t), "normal:1.0")
        reg.create("text.positional_embedding", (spec.N_max, spec.d_t), "normal:0.1")
        self.blocks = [ResidualBlock(reg, f"text.layer.{i}", spec.d_t, spec.heads_t, spec.mlp_ratio)
                       for i in range(1, spec.K + 1)]
        self.ln_final = LayerNorm(reg, "text.ln_final", spec.d_t)
        reg.create("text.proj", (spec.d_t, spec.d), "fan_in")

    def __call__(self, batch: TextBatch, bank: PromptBank | None = None,
                 trace: list | None = None) -> Tensor:
        ids = batch.token_ids
        B, N = ids.shape
        if N > self.spec.N_max:
            raise T.ShapeError(f"text length {N} exceeds N_max={self.spec.N_max}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.spec.vocab):
            raise ValueError(f"token ids must lie in [0, vocab={self.spec.vocab})")
        x = T.embedding(self.reg.tensor("text.token_embedding"), ids)
        x = x + T.slice_axis(self.reg.tensor("text.positional_embedding"), 0, 0, N)
        for i, blk in enumerate(self.blocks, start=1):
            p = bank.text(i) if bank is not None else None
            if p is not None and p.shape[-1] != self.spec.d_t:
                raise T.ShapeError(f"text prompt width {p.shape[-1]} != d_t={self.spec.d_t}")
            n_p = 0 if p is None else p.shape[0]
            if n_p:
                xx = T.concat([T.broadcast_to(p, (B,) + p.shape), x], axis=1)
            else:
                xx = x
            L = xx.shape[1]
            y = blk(xx, causal_mask(L))
            x = T.slice_axis(y, 1, n_p, L) if n_p else y
            if trace is not None:
                trace.append({"event": "layer", "tower": "text", "layer": i, "kind": "text",
                              "input_len": L, "prompt_len": n_p, "carried_len": x.shape[1]})
        x = self.ln_final(x)
        eos = T.gather_rows(x, batch.eos_index)
        return T.matmul(eos, self.reg.tensor("text.proj"))


class VisionEncoder:
    def __init__(self, reg: ParameterRegistry, spec: ModelSpec):
        self.reg, self.spec = reg, spec
        reg.create("vision.patch_embed.weight", (3 * spec.patch * spec.patch, spec.d_v), "fan_in")
        reg.create("vision.class_embedding", (spec.d_v,), "normal:1.0")
        reg.create("vision.positional_embedding", (1 + spec.M, spec.d_v), "normal:0.1")
        self.ln_pre = LayerNorm(reg, "vision.ln_pre", spec.d_v)
        self.blocks = [ResidualBlock(reg, f"vision.layer.{i}", spec.d_v, spec.heads_v, spec.mlp_ratio)
                       for i in range(1, spec.K + 1)]
        self.ln_post = LayerNorm(reg, "vision.ln_post", spec.d_v)
        reg.create("vision.proj", (spec.d_v, spec.d), "fan_in")

    def _frame_prompts(self, bank: PromptBank, layer: int, x: Tensor, B: int, Fp: int,
                       positions, trace) -> Tensor | None:
        mech = bank.pspec.shallow_mechanism
        if mech == "vop" or bank.pspec.video_len == 0:
            p = bank.provide_vop(layer)
            if p is None:
                return None
            p = T.broadcast_to(p, (B * Fp,) + p.shape)
        elif mech == "P":
            p = bank.provide_position(layer, positions)
            if p is None:
                return None
            p = T.broadcast_to(p, (B,) + p.shape).reshape(B * Fp, p.shape[1], p.shape[2])
        else:
            cls_seq = T.select(x, 1, 0).reshape(B, Fp, self.spec.d_v)
            p = bank.provide_context(layer, cls_seq, trace)
            if p is None:
                return None
            p = p.reshape(B * Fp, p.shape[2], p.shape[3])
        if p.shape[-1] != self.spec.d_v:
            raise T.ShapeError(f"visual prompt width {p.shape[-1]} != d_v={self.spec.d_v}")
        return p

    def __call__(self, video: VideoBatch, bank: PromptBank | None = None, positions=None,
                 trace: list | None = None) -> Tensor:
        """Per-frame embeddings (B, F', d). ``positions`` are the 1-based frame indices
        of the F' frame slots (default 1..F')."""
        spec = self.spec
        frames = video.frames
        B, Fp = frames.shape[:2]
        if frames.shape[3] != spec.image_side or frames.shape[4] != spec.image_side:
            raise T.ShapeError(f"frame side {frames.shape[3:]} != image_side {spec.image_side}")
        if positions is None:
            positions = list(range(1, Fp + 1))
        if len(positions) != Fp:
            raise T.ShapeError(f"{len(positions)} positions for {Fp} frame slots")
        split = bank is not None and bank.pspec.split_mode
        K_s = bank.pspec.K_s if split else spec.K
        needs_full = bank is not None and (split or bank.pspec.shallow_mechanism == "C")
        if needs_full and list(positions) != list(range(1, spec.F + 1)):
            raise T.ShapeError(f"mode {bank.pspec.mode} needs exactly F={spec.F} ordered frames")
        if Fp > spec.F:
            raise T.ShapeError(f"{Fp} frames exceed F={spec.F}")

        dtype = self.reg.dtype
        patches = Tensor(patchify(np.asarray(frames, dtype=dtype), spec.patch))
        x = T.matmul(patches, self.reg.tensor("vision.patch_embed.weight"))
        cls = T.broadcast_to(self.reg.tensor("vision.class_embedding"), (B * Fp, 1, spec.d_v))
        x = T.concat([cls, x], axis=1) + self.reg.tensor("vision.positional_embedding")
        x = self.ln_pre(x)

        for i in range(1, K_s + 1):
            blk = self.blocks[i - 1]
            p = self._frame_prompts(bank, i, x, B, Fp, positions, trace) if bank is not None else None
            n_p = 0 if p is None else p.shape[1]
            xx = _insert(x, p, 1) if n_p else x
            y = blk(xx)
            x = _discard(y, 1, n_p) if n_p else y
            if trace is not None:
                trace.append({"event": "layer", "tower": "vision", "layer": i, "kind": "frame",
                              "input_len": xx.shape[1], "prompt_len": n_p,
                              "carried_len": x.shape[1], "input": xx, "output": x})

        if K_s < spec.K:
            F, M = Fp, spec.M
            x4 = x.reshape(B, F, 1 + M, spec.d_v)
            # token-major view so the (F, d_v) table broadcasts over batch and tokens
            x4 = (x4.transpose(0, 2, 1, 3) + bank.frame_pos()).transpose(0, 2, 1, 3)
            cls_tok = T.slice_axis(x4, 2, 0, 1).reshape(B, F, spec.d_v)
            patch_tok = T.slice_axis(x4, 2, 1, 1 + M).reshape(B, F * M, spec.d_v)
            x = T.concat([cls_tok, patch_tok], axis=1)
            for i in range(K_s + 1, spec.K + 1):
                blk = self.blocks[i - 1]
                v = bank.video(i)
                n_p = 0 if v is None else v.shape[0]
                if v is not None and v.shape[-1] != spec.d_v:
                    raise T.ShapeError(f"video prompt width {v.shape[-1]} != d_v={spec.d_v}")
                xx = _insert(x, T.broadcast_to(v, (B,) + v.shape), F) if n_p else x
                if xx.shape[1] != deep_sequence_length(F, n_p, M):
                    raise AssertionError("joint sequence length contract violated")
                y = blk(xx)
                x = _discard(y, F, n_p) if n_p else y
                if trace is not None:
                    trace.append({"event": "layer", "tower": "vision", "layer": i, "kind": "joint",
                                  "input_len": xx.shape[1], "prompt_len": n_p,
                                  "carried_len": x.shape[1], "input": xx, "output": x})
            cls_out = T.slice_axis(x, 1, 0, F)
        else:
            cls_out = T.select(x, 1, 0).reshape(B, Fp, spec.d_v)
        cls_out = self.ln_post(cls_out)
        return T.matmul(cls_out, self.reg.tensor("vision.proj"))


def video_embed(frame_embeddings: Tensor) -> Tensor:
    """Mean over the frame axis: (B, F, d) -> (B, d)."""
    if frame_embeddings.ndim != 3 or frame_embeddings.shape[1] < 1:
        raise T.ShapeError(f"video_embed: expected (B, F>=1, d), got {frame_embeddings.shape}")
    return T.mean(frame_embeddings, axis=1)


def similarity(text_embeds: Tensor, video_embeds: Tensor) -> Tensor:
    """Cosine similarity grid, rows are texts. Zero-norm embeddings are rejected."""
    if text_embeds.ndim != 2 or video_embeds.ndim != 2 or text_embeds.shape[1] != video_embeds.shape[1]:
        raise T.ShapeError(f"similarity: shapes {text_embeds.shape} and {video_embeds.shape}")
    zt = T.l2_normalize(text_embeds, axis=-1)
    zv = T.l2_normalize(video_embeds, axis=-1)
    return T.matmul(zt, zv.transpose(1, 0))


class DualEncoder:
    """Text tower + vision tower + logit scale, sharing one parameter registry."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32, materialize: bool = True,
                 logit_scale_init: float = float(np.log(1 / 0.07))):
        self.spec = spec
        self.registry = ParameterRegistry(seed=seed, dtype=dtype, materialize=materialize)
        self.text = TextEncoder(self.registry, spec)
        self.vision = VisionEncoder(self.registry, spec)
        self.registry.create("logit_scale", (), f"const:{logit_scale_init}")
        self.bank: PromptBank | None = None
        self.adapters: tuple[str, int] | None = None

    # -- injection ------------------------------------------------------------
    def attach_prompts(self, pspec: PromptSpec) -> PromptBank:
        if self.bank is not None:
            raise ConfigError("prompts already attached")
        self.bank = PromptBank(self.registry, self.spec, pspec)
        return self.bank

    def attach_adapters(self, where: str, hidden: int) -> None:
        if self.adapters is not None:
            raise ConfigError("adapters already attached")
        for blk in self.text.blocks + self.vision.blocks:
            blk.add_adapter(where, hidden)
        self.adapters = (where, hidden)

    @property
    def prompt_spec(self) -> PromptSpec | None:
        return None if self.bank is None else self.bank.pspec

    # -- forward ----------------------------------------------------------------
    def encode_text(self, batch: TextBatch, trace: list | None = None) -> Tensor:
        return self.text(batch, self.bank, trace)

    def encode_frames(self, video: VideoBatch, positions=None, trace: list | None = None) -> Tensor:
        return self.vision(video, self.bank, positions, trace)

    def encode_video(self, video: VideoBatch, positions=None, trace: list | None = None) -> Tensor:
        return video_embed(self.encode_frames(video, positions, trace))

    def similarity(self, text: TextBatch, video: VideoBatch) -> Tensor:
        return similarity(self.encode_text(text), self.encode_video(video))

    def logit_scale(self, max_scale: float = 100.0) -> Tensor:
        return T.clip_max(T.exp(self.registry.tensor("logit_scale")), max_scale)
