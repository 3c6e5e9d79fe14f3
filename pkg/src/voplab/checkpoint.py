"""Zip checkpoint: ``manifest.json`` plus raw little-endian float32 payloads.

Layout::

    manifest.json           specs, group table, optimizer step counts, RNG state
    params/<name>.f32       one file per parameter group
    adam_m/<name>.f32       first moments (trainable groups)
    adam_v/<name>.f32       second moments (trainable groups)

Entries are stored uncompressed with a fixed timestamp, so identical state
gives identical bytes.
"""
from __future__ import annotations

import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelSpec, PromptSpec, Protocol, TrainConfig
from .encoders import DualEncoder
from .protocols import apply_protocol
from .trainer import TrainState

FORMAT = "voplab-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_spec: ModelSpec
    prompt_spec: PromptSpec | None
    protocol: Protocol
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    state: TrainState
    extra: dict = field(default_factory=dict)


def _put(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path, model: DualEncoder, protocol: Protocol, train_config: TrainConfig,
                    state: TrainState, extra: dict | None = None) -> Path:
    path = Path(path)
    reg = model.registry
    opt = state.optimizer or {"m": {}, "v": {}, "t": {}}
    groups = [{"name": g.name, "shape": list(g.shape), "trainable": g.trainable} for g in reg]
    manifest = {
        "format": FORMAT,
        "model_spec": model.spec.to_dict(),
        "prompt_spec": None if model.prompt_spec is None else model.prompt_spec.to_dict(),
        "protocol": protocol.to_dict(),
        "train_config": train_config.to_dict(),
        "groups": groups,
        "optimizer_steps": {k: int(v) for k, v in opt["t"].items()},
        "step": int(state.step),
        "rng_state": state.rng_state,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _put(zf, "manifest.json", (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
        for g in reg:
            _put(zf, f"params/{g.name}.f32", _f32(g.tensor.data))
        for name in sorted(opt["t"]):
            _put(zf, f"adam_m/{name}.f32", _f32(opt["m"][name]))
            _put(zf, f"adam_v/{name}.f32", _f32(opt["v"][name]))
    os.replace(tmp, path)
    return path


def _read(zf: zipfile.ZipFile, name: str, shape) -> np.ndarray:
    try:
        raw = zf.read(name)
    except KeyError:
        raise CheckpointError(f"checkpoint lacks payload {name}") from None
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != 4 * count:
        raise CheckpointError(f"{name}: {len(raw)} bytes for shape {tuple(shape)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
        params, trainable, shapes = {}, {}, {}
        for g in manifest["groups"]:
            shape = tuple(g["shape"])
            params[g["name"]] = _read(zf, f"params/{g['name']}.f32", shape)
            trainable[g["name"]] = bool(g["trainable"])
            shapes[g["name"]] = shape
        steps = manifest["optimizer_steps"]
        opt = {"m": {}, "v": {}, "t": dict(steps)}
        for name in steps:
            opt["m"][name] = _read(zf, f"adam_m/{name}.f32", shapes[name])
            opt["v"][name] = _read(zf, f"adam_v/{name}.f32", shapes[name])
    ps = manifest["prompt_spec"]
    return Checkpoint(
        model_spec=ModelSpec.from_dict(manifest["model_spec"]),
        prompt_spec=None if ps is None else PromptSpec.from_dict(ps),
        protocol=Protocol.from_dict(manifest["protocol"]),
        train_config=TrainConfig.from_dict(manifest["train_config"]),
        params=params,
        trainable=trainable,
        state=TrainState(step=manifest["step"], rng_state=manifest["rng_state"],
                         optimizer=opt if steps else None),
        extra=manifest["extra"],
    )


def restore_model(ckpt: Checkpoint) -> DualEncoder:
    """Rebuild the model the checkpoint was taken from and load every group."""
    model = DualEncoder(ckpt.model_spec, seed=ckpt.train_config.seed,
                        logit_scale_init=ckpt.train_config.logit_scale_init)
    apply_protocol(model, ckpt.protocol, ckpt.prompt_spec)
    if set(model.registry.names()) != set(ckpt.params):
        raise CheckpointError("checkpoint groups do not match the rebuilt model")
    if model.registry.mask() != ckpt.trainable:
        raise CheckpointError("checkpoint trainability flags disagree with its protocol")
    model.registry.load_state(ckpt.params)
    return model
