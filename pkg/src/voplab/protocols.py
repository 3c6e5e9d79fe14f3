"""Tuning protocols: which groups train, what gets injected, and how much it costs.

Percentages use two denominators. ``PUBLISHED_TOTAL`` is the 119.8M backbone size
used for reporting at CLIP dimensions; ``reconstructed`` is the backbone this
package actually builds (every group outside prompts and adapters).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .config import ConfigError, ModelSpec, PromptSpec, Protocol
from .encoders import DualEncoder

PUBLISHED_TOTAL = 119_800_000

# Reference overhead column (percent of the 119.8M reference total) at CLIP ViT-B/32 dims.
REFERENCE_PERCENT = {
    "full": 100.0, "bias": 0.104, "proj": 0.547, "partial": 6.410,
    "adapter_attn": 1.655, "adapter_ffn": 1.655,
    "vop": 0.103, "vop_p": 0.441, "vop_c": 11.898,
    "vop_f": 0.103, "vop_fp": 0.328, "vop_fc": 11.785,
}

# Defaults of the reference setting: 8 prompts per layer, 4 video tokens, split after layer 8.
REFERENCE_PROMPTS = PromptSpec(P_t=8, P_v=8, video_len=4, K_s=8)


def _is_extra(name: str) -> bool:
    return name.startswith("prompts.") or ".adapter_" in name


def backbone_names(names) -> list[str]:
    return [n for n in names if not _is_extra(n)]


def protocol_mask(names, protocol: Protocol, K: int) -> dict[str, bool]:
    kind = protocol.kind
    names = list(names)
    if kind == "full":
        return {n: True for n in names}
    if kind == "bias":
        return {n: not _is_extra(n) and n.endswith(".bias") for n in names}
    if kind == "proj":
        return {n: n in ("text.proj", "vision.proj") for n in names}
    if kind == "partial":
        last = f"vision.layer.{K}."
        return {n: n in ("text.proj", "vision.proj") or (n.startswith(last) and not _is_extra(n))
                for n in names}
    if kind.startswith("adapter"):
        return {n: ".adapter_" in n for n in names}
    if protocol.is_prompt:
        return {n: n.startswith("prompts.") for n in names}
    raise ConfigError(f"unknown protocol kind {kind!r}")


def apply_protocol(model: DualEncoder, protocol: Protocol, prompts: PromptSpec | None = None) -> dict:
    """Inject whatever the protocol needs, then set the trainability mask.

    For prompt protocols the mode of ``prompts`` is overridden by the protocol.
    """
    if protocol.kind.startswith("adapter"):
        model.attach_adapters(protocol.kind.split("_", 1)[1], protocol.adapter_hidden)
    elif protocol.is_prompt:
        pspec = dataclasses.replace(prompts or PromptSpec(), mode=protocol.prompt_mode)
        model.attach_prompts(pspec)
    mask = protocol_mask(model.registry.names(), protocol, model.spec.K)
    model.registry.set_trainable(mask)
    return mask


@dataclass
class LedgerRow:
    name: str
    count: int
    trainable: bool


@dataclass
class ParameterLedger:
    groups: list[LedgerRow]
    trainable_total: int
    model_total: int
    backbone_total: int
    denominator: int

    @property
    def percent(self) -> float:
        return 100.0 * self.trainable_total / self.denominator

    @property
    def percent_vs_reconstructed(self) -> float:
        return 100.0 * self.trainable_total / self.backbone_total


def count_parameters(registry, mask: dict[str, bool] | None = None,
                     denominator: int = PUBLISHED_TOTAL) -> ParameterLedger:
    mask = registry.mask() if mask is None else mask
    names = registry.names()
    missing = [n for n in names if n not in mask]
    if missing:
        raise ConfigError(f"mask misses groups: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    unknown = set(mask) - set(names)
    if unknown:
        raise ConfigError(f"mask names unknown groups: {sorted(unknown)[:5]}")
    rows = [LedgerRow(n, registry[n].size, bool(mask[n])) for n in names]
    return ParameterLedger(
        groups=rows,
        trainable_total=sum(r.count for r in rows if r.trainable),
        model_total=sum(r.count for r in rows),
        backbone_total=sum(r.count for r in rows if not _is_extra(r.name)),
        denominator=int(denominator),
    )


def build_for_protocol(spec: ModelSpec, protocol: Protocol, prompts: PromptSpec | None = None,
                       materialize: bool = False, seed: int = 0) -> DualEncoder:
    model = DualEncoder(spec, seed=seed, materialize=materialize)
    apply_protocol(model, protocol, prompts)
    return model


def ledger_for(spec: ModelSpec, protocol: Protocol, prompts: PromptSpec | None = None,
               denominator: int = PUBLISHED_TOTAL) -> ParameterLedger:
    """Shape-only build (no values allocated) followed by a ledger walk."""
    model = build_for_protocol(spec, protocol, prompts, materialize=False)
    return count_parameters(model.registry, denominator=denominator)


# -- closed forms -------------------------------------------------------------

def block_params(w: int, mlp_ratio: int = 4) -> int:
    h = w * mlp_ratio
    return 4 * w + (w * 3 * w + 3 * w) + (w * w + w) + (w * h + h) + (h * w + w)


def backbone_params(spec: ModelSpec) -> int:
    text = (spec.vocab + spec.N_max) * spec.d_t + spec.K * block_params(spec.d_t, spec.mlp_ratio) \
        + 2 * spec.d_t + spec.d_t * spec.d
    vision = 3 * spec.patch ** 2 * spec.d_v + spec.d_v + (1 + spec.M) * spec.d_v + 4 * spec.d_v \
        + spec.K * block_params(spec.d_v, spec.mlp_ratio) + spec.d_v * spec.d
    return text + vision + 1


def cmm_params(spec: ModelSpec, pspec: PromptSpec) -> tuple[int, int]:
    """(cmm, cmm output width)."""
    h = pspec.cmm_hidden or spec.d_v
    one = spec.d_v * 4 * h + h * 4 * h + 8 * h
    if pspec.cmm_kind == "bilstm":
        return 2 * one, 2 * h
    if pspec.cmm_kind == "lstm":
        return one, h
    return spec.F * spec.d_v + pspec.cmm_layers * block_params(spec.d_v, spec.mlp_ratio), spec.d_v


def _layers_in(lo: int, hi: int, depth: tuple[int, int]) -> int:
    return max(0, min(hi, depth[1]) - max(lo, depth[0]) + 1)


def prompt_params(spec: ModelSpec, pspec: PromptSpec) -> int:
    p = pspec.resolved(spec)
    depth, K, K_s = p.depth_range, spec.K, p.K_s
    n_frame = _layers_in(1, K_s, depth)
    n_video = _layers_in(K_s + 1, K, depth)
    total = _layers_in(1, K, depth) * p.P_t * spec.d_t
    total += n_frame * (p.P_v - p.video_len) * spec.d_v
    total += n_video * p.P_v * spec.d_v
    if p.split_mode and K_s < K:
        total += spec.F * spec.d_v
    if p.shallow_mechanism == "P":
        total += n_frame * spec.F * p.video_len * spec.d_v
    if p.shallow_mechanism == "C" and p.video_len > 0 and n_frame > 0:
        cmm, width = cmm_params(spec, p)
        out = p.video_len * spec.d_v
        total += cmm + width * out + out
    return total


def closed_form_trainable(spec: ModelSpec, protocol: Protocol, prompts: PromptSpec | None = None) -> int:
    kind = protocol.kind
    if kind == "full":
        return backbone_params(spec)
    if kind == "bias":
        per_block = 11
        return spec.K * per_block * (spec.d_t + spec.d_v) + spec.d_t + 2 * spec.d_v
    if kind == "proj":
        return (spec.d_t + spec.d_v) * spec.d
    if kind == "partial":
        return block_params(spec.d_v, spec.mlp_ratio) + (spec.d_t + spec.d_v) * spec.d
    if kind.startswith("adapter"):
        h = protocol.adapter_hidden
        return sum(spec.K * (2 * h * w + h + w) for w in (spec.d_t, spec.d_v))
    pspec = dataclasses.replace(prompts or PromptSpec(), mode=protocol.prompt_mode)
    return prompt_params(spec, pspec)
