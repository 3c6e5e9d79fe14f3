"""Learnable prompt blocks and the four video-prompt mechanisms.

Group names::

    prompts.text.layer.{i}                       (P_t, d_t)
    prompts.vision.shared.layer.{i}              (P_v - video_len, d_v)  per-frame layers
    prompts.vision.position.layer.{i}.frame.{j}  (video_len, d_v)        P modes
    prompts.vision.video.layer.{i}               (P_v, d_v)              joint layers (F modes)
    prompts.frame_pos                            (F, d_v)                F modes, K_s < K
    prompts.context.cmm.* / prompts.context.fc.* C modes, shared by all layers

Layer indices ``i`` and frame positions ``j`` are 1-based.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelSpec, PromptSpec
from .layers import Linear, ResidualBlock
from .params import ParameterRegistry
from .tensor import Tensor


class LSTM:
    """Single-layer LSTM, gate order (i, f, g, o), two bias vectors."""

    def __init__(self, reg: ParameterRegistry, prefix: str, d_in: int, hidden: int):
        self.reg = reg
        self.hidden = hidden
        bound = f"uniform:{1.0 / np.sqrt(hidden)}"
        self.names = {k: f"{prefix}.{k}" for k in ("weight_ih", "weight_hh", "bias_ih", "bias_hh")}
        reg.create(self.names["weight_ih"], (d_in, 4 * hidden), bound)
        reg.create(self.names["weight_hh"], (hidden, 4 * hidden), bound)
        reg.create(self.names["bias_ih"], (4 * hidden,), bound)
        reg.create(self.names["bias_hh"], (4 * hidden,), bound)

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        B, S, _ = x.shape
        H = self.hidden
        p = {k: self.reg.tensor(n) for k, n in self.names.items()}
        xw = T.matmul(x, p["weight_ih"]) + p["bias_ih"] + p["bias_hh"]
        h = Tensor(np.zeros((B, H), dtype=xw.dtype))
        c = Tensor(np.zeros((B, H), dtype=xw.dtype))
        outs: list[Tensor | None] = [None] * S
        steps = range(S - 1, -1, -1) if reverse else range(S)
        for t in steps:
            gates = T.select(xw, 1, t) + T.matmul(h, p["weight_hh"])
            i = T.sigmoid(T.slice_axis(gates, -1, 0, H))
            f = T.sigmoid(T.slice_axis(gates, -1, H, 2 * H))
            g = T.tanh(T.slice_axis(gates, -1, 2 * H, 3 * H))
            o = T.sigmoid(T.slice_axis(gates, -1, 3 * H, 4 * H))
            c = f * c + i * g
            h = o * T.tanh(c)
            outs[t] = h
        return T.stack(outs, axis=1)


class BiLSTM:
    def __init__(self, reg: ParameterRegistry, prefix: str, d_in: int, hidden: int):
        self.fwd = LSTM(reg, f"{prefix}.forward", d_in, hidden)
        self.bwd = LSTM(reg, f"{prefix}.reverse", d_in, hidden)
        self.out_width = 2 * hidden

    def __call__(self, x: Tensor) -> Tensor:
        return T.concat([self.fwd(x), self.bwd(x, reverse=True)], axis=-1)


class UniLSTM:
    def __init__(self, reg: ParameterRegistry, prefix: str, d_in: int, hidden: int):
        self.lstm = LSTM(reg, prefix, d_in, hidden)
        self.out_width = hidden

    def __call__(self, x: Tensor) -> Tensor:
        return self.lstm(x)


class TransformerCMM:
    """Encoder-only stack over the frame [CLS] sequence, with learned temporal positions."""

    def __init__(self, reg: ParameterRegistry, prefix: str, width: int, heads: int, frames: int,
                 layers: int, mlp_ratio: int = 4):
        self.reg = reg
        self.pos_name = f"{prefix}.pos"
        reg.create(self.pos_name, (frames, width), "normal:0.02")
        self.blocks = [ResidualBlock(reg, f"{prefix}.layer.{i}", width, heads, mlp_ratio)
                       for i in range(1, layers + 1)]
        self.out_width = width

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.reg.tensor(self.pos_name)
        for blk in self.blocks:
            x = blk(x)
        return x


class ContextGenerator:
    """CMM over per-frame [CLS] tokens followed by an FC that emits video_len tokens per frame.

    One instance serves every encoder layer.
    """

    def __init__(self, reg: ParameterRegistry, spec: ModelSpec, pspec: PromptSpec,
                 prefix: str = "prompts.context"):
        self.spec, self.pspec = spec, pspec
        hidden = pspec.cmm_hidden
        if pspec.cmm_kind == "bilstm":
            self.cmm = BiLSTM(reg, f"{prefix}.cmm", spec.d_v, hidden)
        elif pspec.cmm_kind == "lstm":
            self.cmm = UniLSTM(reg, f"{prefix}.cmm", spec.d_v, hidden)
        else:
            self.cmm = TransformerCMM(reg, f"{prefix}.cmm", spec.d_v, spec.heads_v, spec.F,
                                      pspec.cmm_layers, spec.mlp_ratio)
        w = pspec.video_len * spec.d_v
        fan = f"uniform:{1.0 / np.sqrt(self.cmm.out_width)}"
        self.fc = Linear(reg, f"{prefix}.fc", self.cmm.out_width, w, init=fan, bias_init=fan)

    def modulate(self, cls_seq: Tensor) -> Tensor:
        """(B, F, d_v) -> context-modulated sequence (B, F, cmm_out)."""
        if cls_seq.ndim != 3 or cls_seq.shape[1] != self.spec.F or cls_seq.shape[2] != self.spec.d_v:
            raise T.ShapeError(
                f"context: expected [CLS] sequence (B, {self.spec.F}, {self.spec.d_v}), "
                f"got {cls_seq.shape}")
        return self.cmm(cls_seq)

    def generate(self, modulated: Tensor) -> Tensor:
        """(B, F, cmm_out) -> (B, F, video_len, d_v)."""
        B, F, _ = modulated.shape
        out = self.fc(modulated)
        return out.reshape(B, F, self.pspec.video_len, self.spec.d_v)


class PromptBank:
    def __init__(self, reg: ParameterRegistry, spec: ModelSpec, pspec: PromptSpec):
        pspec = pspec.resolved(spec)
        self.reg, self.spec, self.pspec = reg, spec, pspec
        std = f"normal:{pspec.init_std}"
        K, K_s = spec.K, pspec.K_s
        self.text_layers = [i for i in range(1, K + 1) if pspec.in_depth(i)]
        self.frame_layers = [i for i in range(1, K_s + 1) if pspec.in_depth(i)]
        self.video_layers = [i for i in range(K_s + 1, K + 1) if pspec.in_depth(i)]
        shared_len = pspec.P_v - pspec.video_len
        for i in self.text_layers:
            reg.create(f"prompts.text.layer.{i}", (pspec.P_t, spec.d_t), std)
        for i in self.frame_layers:
            reg.create(f"prompts.vision.shared.layer.{i}", (shared_len, spec.d_v), std)
            if pspec.shallow_mechanism == "P" and pspec.video_len > 0:
                for j in range(1, spec.F + 1):
                    reg.create(f"prompts.vision.position.layer.{i}.frame.{j}",
                               (pspec.video_len, spec.d_v), std)
        for i in self.video_layers:
            reg.create(f"prompts.vision.video.layer.{i}", (pspec.P_v, spec.d_v), std)
        self.has_frame_pos = pspec.split_mode and K_s < K
        if self.has_frame_pos:
            reg.create("prompts.frame_pos", (spec.F, spec.d_v), "zeros")
        self.context: ContextGenerator | None = None
        if pspec.shallow_mechanism == "C" and pspec.video_len > 0 and self.frame_layers:
            self.context = ContextGenerator(reg, spec, pspec)

    # -- text ---------------------------------------------------------------
    def text(self, layer: int) -> Tensor | None:
        if layer not in self.text_layers or self.pspec.P_t == 0:
            return None
        return self.reg.tensor(f"prompts.text.layer.{layer}")

    # -- per-frame visual prompts -------------------------------------------
    def provide_vop(self, layer: int) -> Tensor | None:
        """Shared visual block for ``layer``; None when the layer carries no prompts."""
        if layer not in self.frame_layers:
            return None
        return self.reg.tensor(f"prompts.vision.shared.layer.{layer}")

    def provide_position(self, layer: int, positions) -> Tensor | None:
        """(len(positions), P_v, d_v): shared block followed by the (layer, j)-keyed block."""
        shared = self.provide_vop(layer)
        if shared is None:
            return None
        positions = [int(j) for j in positions]
        for j in positions:
            if not 1 <= j <= self.spec.F:
                raise ConfigError(f"frame position {j} outside [1, F={self.spec.F}]")
        n = len(positions)
        shared_b = T.broadcast_to(shared, (n,) + shared.shape)
        if self.pspec.video_len == 0:
            return shared_b
        table = T.stack([self.reg.tensor(f"prompts.vision.position.layer.{layer}.frame.{j}")
                         for j in positions], axis=0)
        return T.concat([shared_b, table], axis=1)

    def provide_context(self, layer: int, cls_seq: Tensor, trace: list | None = None) -> Tensor | None:
        """(B, F, P_v, d_v) prompts generated from the layer's input [CLS] sequence."""
        shared = self.provide_vop(layer)
        if shared is None:
            return None
        B, F = cls_seq.shape[0], cls_seq.shape[1]
        shared_b = T.broadcast_to(shared, (B, F) + shared.shape)
        if self.pspec.video_len == 0:
            return shared_b
        modulated = self.context.modulate(cls_seq)
        if trace is not None:
            trace.append({"event": "cmm", "layer": layer, "modulated": modulated})
        generated = self.context.generate(modulated)
        return T.concat([shared_b, generated], axis=2)

    # -- joint (video-level) prompts ----------------------------------------
    def video(self, layer: int) -> Tensor | None:
        if layer not in self.video_layers or self.pspec.P_v == 0:
            return None
        return self.reg.tensor(f"prompts.vision.video.layer.{layer}")

    def frame_pos(self) -> Tensor | None:
        return self.reg.tensor("prompts.frame_pos") if self.has_frame_pos else None

    def group_names(self) -> list[str]:
        return [n for n in self.reg.names() if n.startswith("prompts.")]
