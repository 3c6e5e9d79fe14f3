"""Architecture and prompt-mechanism configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

PROMPT_MODES = ("vop", "P", "C", "F", "F+P", "F+C")
CMM_KINDS = ("bilstm", "lstm", "transformer")


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


@dataclass(frozen=True)
class ModelSpec:
    K: int = 4
    d_t: int = 32
    d_v: int = 48
    d: int = 32
    heads_t: int = 4
    heads_v: int = 4
    N_max: int = 8
    F: int = 4
    patch: int = 4
    image_side: int = 12
    vocab: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("K", "d_t", "d_v", "d", "heads_t", "heads_v", "N_max", "F", "patch",
                     "image_side", "vocab", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelSpec.{name} must be >= 1")
        if self.image_side % self.patch:
            raise ConfigError(
                f"image_side {self.image_side} is not divisible by patch {self.patch}")
        if self.d_t % self.heads_t:
            raise ConfigError(f"d_t {self.d_t} is not divisible by heads_t {self.heads_t}")
        if self.d_v % self.heads_v:
            raise ConfigError(f"d_v {self.d_v} is not divisible by heads_v {self.heads_v}")

    @property
    def M(self) -> int:
        return (self.image_side // self.patch) ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return _strict(cls, d)


def clip_b32() -> ModelSpec:
    """ViT-B/32 + 12-layer text transformer dimensions, 12 frames per video."""
    return ModelSpec(K=12, d_t=512, d_v=768, d=512, heads_t=8, heads_v=12, N_max=77, F=12,
                     patch=32, image_side=224, vocab=49408)


def toy() -> ModelSpec:
    return ModelSpec()


@dataclass(frozen=True)
class PromptSpec:
    P_t: int = 4
    P_v: int = 4
    video_len: int = 0
    depth_range: tuple[int, int] | None = None  # inclusive, 1-based; None means all layers
    mode: str = "vop"
    K_s: int | None = None  # None means K (no split)
    cmm_kind: str = "bilstm"
    cmm_hidden: int | None = None  # None means d_v
    cmm_layers: int = 4  # transformer CMM depth
    init_std: float = 0.02

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ConfigError(f"unknown prompt mode {self.mode!r}; expected one of {PROMPT_MODES}")
        if self.cmm_kind not in CMM_KINDS:
            raise ConfigError(f"unknown cmm_kind {self.cmm_kind!r}; expected one of {CMM_KINDS}")
        if self.P_t < 0 or self.P_v < 0:
            raise ConfigError("prompt lengths must be >= 0")
        if not 0 <= self.video_len <= self.P_v:
            raise ConfigError(f"video_len {self.video_len} must lie in [0, P_v={self.P_v}]")
        if self.depth_range is not None:
            object.__setattr__(self, "depth_range", tuple(int(v) for v in self.depth_range))
            lo, hi = self.depth_range
            if lo < 1 or hi < lo:
                raise ConfigError(f"depth_range {self.depth_range} must satisfy 1 <= lo <= hi")

    @property
    def split_mode(self) -> bool:
        return self.mode.startswith("F")

    @property
    def shallow_mechanism(self) -> str:
        """Per-frame mechanism: 'vop', 'P' or 'C'."""
        base = self.mode.split("+")[-1] if "+" in self.mode else self.mode
        return "vop" if base == "F" else base

    @property
    def uses_video_len(self) -> bool:
        return self.shallow_mechanism in ("P", "C")

    def resolved(self, spec: ModelSpec) -> "PromptSpec":
        """Fill defaults that depend on the model and check ranges against it."""
        depth = self.depth_range or (1, spec.K)
        if depth[1] > spec.K:
            raise ConfigError(f"depth_range {depth} exceeds K={spec.K}")
        K_s = spec.K if self.K_s is None else self.K_s
        if not 0 <= K_s <= spec.K:
            raise ConfigError(f"K_s={K_s} must lie in [0, K={spec.K}]")
        if not self.split_mode:
            K_s = spec.K
        video_len = self.video_len if self.uses_video_len else 0
        hidden = self.cmm_hidden or spec.d_v
        return dataclasses.replace(self, depth_range=depth, K_s=K_s, video_len=video_len,
                                   cmm_hidden=hidden)

    def in_depth(self, layer: int) -> bool:
        lo, hi = self.depth_range
        return lo <= layer <= hi

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["depth_range"] is not None:
            d["depth_range"] = list(d["depth_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        d = dict(d)
        if d.get("depth_range") is not None:
            d["depth_range"] = tuple(d["depth_range"])
        return _strict(cls, d)


def _strict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class Protocol:
    kind: str = "vop"
    adapter_hidden: int = 64

    KINDS = ("full", "bias", "proj", "partial", "adapter_attn", "adapter_ffn",
             "vop", "vop_p", "vop_c", "vop_f", "vop_fp", "vop_fc")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown protocol kind {self.kind!r}; expected one of {self.KINDS}")
        if self.kind.startswith("adapter") and self.adapter_hidden <= 0:
            raise ConfigError("adapter_hidden must be > 0")

    @property
    def is_prompt(self) -> bool:
        return self.kind.startswith("vop")

    @property
    def prompt_mode(self) -> str | None:
        return {"vop": "vop", "vop_p": "P", "vop_c": "C", "vop_f": "F", "vop_fp": "F+P",
                "vop_fc": "F+C"}.get(self.kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "adapter_hidden": self.adapter_hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        return _strict(cls, d)


MODE_TO_KIND = {"vop": "vop", "P": "vop_p", "C": "vop_c", "F": "vop_f", "F+P": "vop_fp",
                "F+C": "vop_fc"}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.2
    seed: int = 0
    logit_scale_init: float = 2.659260036932778  # ln(1/0.07)
    logit_scale_max: float = 100.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_grid: tuple[float, ...] = field(default=())
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        for lr in self.lr_grid:
            if not 1e-6 <= lr <= 1e-2:
                raise ConfigError(f"grid lr {lr} outside [1e-6, 1e-2]")
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "lr_grid", tuple(self.lr_grid))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(d["betas"])
        d["lr_grid"] = list(d["lr_grid"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _strict(cls, d)
