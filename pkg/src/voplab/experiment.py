"""Experiment configuration and the runners behind each CLI command."""
from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import report
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import ConfigError, ModelSpec, PromptSpec, Protocol, TrainConfig, clip_b32, toy
from .corpus import CorpusConfig, OutputExists, dataset_hash, generate, load_corpus, write_corpus
from .encoders import DualEncoder
from .protocols import apply_protocol, count_parameters, ledger_for
from .trainer import NonFiniteLoss, TrainState, evaluate_split, load_backbone, lr_search, train

PRESETS = {"toy": toy, "clip_b32": clip_b32}
AXES = ("depth", "length", "video_len", "k_split", "cmm")
_TOP_KEYS = {"model_preset", "model", "prompts", "protocol", "train", "corpus", "out", "data",
             "backbone", "count_protocols", "ablation"}


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=toy)
    prompts: PromptSpec = field(default_factory=PromptSpec)
    protocol: Protocol = field(default_factory=Protocol)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    out: str = "runs/default"
    data: str | None = None
    backbone: str | None = None
    count_protocols: tuple[str, ...] = Protocol.KINDS
    ablation: dict = field(default_factory=dict)
    model_preset: str = "toy"

    def __post_init__(self):
        for k in self.count_protocols:
            Protocol(k)
        if self.ablation:
            unknown = set(self.ablation) - {"axis", "values"}
            if unknown:
                raise ConfigError(f"ablation: unknown keys {sorted(unknown)}")
            if self.ablation.get("axis") not in AXES:
                raise ConfigError(f"ablation axis must be one of {AXES}")

    @property
    def data_dir(self) -> Path:
        return Path(self.data) if self.data else Path(self.out) / "data"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"experiment config: unknown keys {sorted(unknown)}")
        preset = d.get("model_preset", "toy")
        if preset not in PRESETS:
            raise ConfigError(f"model_preset must be one of {sorted(PRESETS)}")
        base = PRESETS[preset]().to_dict()
        overrides = d.get("model", {})
        unknown = set(overrides) - set(base)
        if unknown:
            raise ConfigError(f"ModelSpec: unknown keys {sorted(unknown)}")
        return cls(
            model=ModelSpec.from_dict({**base, **overrides}),
            prompts=PromptSpec.from_dict(d.get("prompts", {})),
            protocol=Protocol.from_dict(d.get("protocol", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            corpus=CorpusConfig.from_dict(d.get("corpus", {})),
            out=str(d.get("out", "runs/default")),
            data=d.get("data"),
            backbone=d.get("backbone"),
            count_protocols=tuple(d.get("count_protocols", Protocol.KINDS)),
            ablation=dict(d.get("ablation", {})),
            model_preset=preset,
        )

    def to_dict(self) -> dict:
        return {
            "model_preset": self.model_preset,
            "model": self.model.to_dict(),
            "prompts": self.prompts.to_dict(),
            "protocol": self.protocol.to_dict(),
            "train": self.train.to_dict(),
            "corpus": self.corpus.to_dict(),
            "out": self.out,
            "data": self.data,
            "backbone": self.backbone,
            "count_protocols": list(self.count_protocols),
            "ablation": self.ablation,
        }

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(
                cfg, train=dataclasses.replace(cfg.train, seed=seed),
                corpus=dataclasses.replace(cfg.corpus, seed=seed))
        if out is not None:
            cfg = dataclasses.replace(cfg, out=out)
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as e:  # wrong value types surface here from the dataclass constructors
        raise ConfigError(str(e)) from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _claim(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExists(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


# -- generate ----------------------------------------------------------------------

def run_generate(cfg: ExperimentConfig, force: bool = False) -> Path:
    out = cfg.data_dir
    if (out / "manifest.json").exists() and not force:
        raise OutputExists(f"{out} already holds a corpus; pass --force to overwrite")
    write_corpus(generate(cfg.corpus), out, force=True)
    _write_json(out / "experiment.json", cfg.to_dict())
    return out


def check_fit(corpus: CorpusConfig, model: ModelSpec) -> None:
    bad = [k for k in ("F", "image_side", "patch", "vocab") if getattr(corpus, k) != getattr(model, k)]
    if bad:
        raise ConfigError(f"dataset and model spec disagree on {bad}")
    if corpus.N > model.N_max:
        raise ConfigError(f"dataset text length {corpus.N} exceeds model N_max {model.N_max}")


# -- model construction ----------------------------------------------------------------

def build_model(cfg: ExperimentConfig, prompts: PromptSpec | None = None,
                protocol: Protocol | None = None, backbone: dict | None = None) -> DualEncoder:
    model = DualEncoder(cfg.model, seed=cfg.train.seed, logit_scale_init=cfg.train.logit_scale_init)
    if backbone is not None:
        load_backbone(model, backbone)
    apply_protocol(model, protocol or cfg.protocol, prompts or cfg.prompts)
    return model


def _backbone(cfg: ExperimentConfig) -> dict | None:
    if not cfg.backbone:
        return None
    if not Path(cfg.backbone).is_file():
        raise ConfigError(f"backbone checkpoint {cfg.backbone} not found")
    ck = load_checkpoint(cfg.backbone)
    if ck.model_spec != cfg.model:
        raise ConfigError("backbone checkpoint was trained with a different model spec")
    return ck.params


# -- train -------------------------------------------------------------------------------

@dataclass
class TrainOutcome:
    out: Path
    lr: float
    final_val: dict | None
    log: list


def run_train(cfg: ExperimentConfig, force: bool = False, resume: str | None = None,
              stop_after: int | None = None, out: Path | None = None,
              prompts: PromptSpec | None = None) -> TrainOutcome:
    out = Path(out or Path(cfg.out) / "train")
    data = cfg.data_dir
    if not (data / "manifest.json").exists():
        raise ConfigError(f"no dataset at {data}; run generate first")
    corpus = load_corpus(data)
    check_fit(corpus.config, cfg.model)
    log_path = out / "log.jsonl"
    backbone = _backbone(cfg)
    prompts = prompts or cfg.prompts
    started = time.time()

    if resume is not None:
        ck = load_checkpoint(resume)
        model = restore_model(ck)
        tcfg = ck.train_config
        keep = int(ck.extra.get("log_records", 0))
        out.mkdir(parents=True, exist_ok=True)
        lines = log_path.read_text().splitlines(keepends=True) if log_path.exists() else []
        if len(lines) < keep:
            raise ConfigError(f"log at {log_path} is shorter than the checkpoint expects")
        log_path.write_text("".join(lines[:keep]))
        state, lr, grid = ck.state, tcfg.lr, []
    else:
        _claim(out, force)
        if log_path.exists():
            log_path.unlink()
        grid = []
        lr = cfg.train.lr
        if cfg.train.lr_grid:
            lr, grid = lr_search(lambda: build_model(cfg, prompts, backbone=backbone), corpus,
                                 cfg.train, cfg.train.lr_grid)
        tcfg = dataclasses.replace(cfg.train, lr=lr)
        model = build_model(cfg, prompts, backbone=backbone)
        state = None
        ledger = count_parameters(model.registry)
        header = {"kind": "run", "dataset_sha256": dataset_hash(data),
                  "protocol": cfg.protocol.kind, "lr": lr,
                  "trainable": ledger.trainable_total, "total": ledger.model_total,
                  "lr_grid": [{"lr": g["lr"], "t2v_R@1": g["t2v_R@1"]} for g in grid]}
        log_path.write_text(json.dumps(header, sort_keys=True) + "\n")
        _write_json(out / "config.json", {**cfg.to_dict(), "prompts": prompts.to_dict(),
                                          "train": tcfg.to_dict()})

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    n_header = 1

    def snapshot(st: TrainState, records: list) -> None:
        save_checkpoint(ckpt_dir / f"step-{st.step:06d}.zip", model, cfg.protocol if resume is None
                        else ck.protocol, tcfg, st, {"log_records": n_header + len(records) + done})

    done = 0
    if resume is not None:
        done = int(ck.extra.get("log_records", 1)) - n_header
    result = train(model, corpus, tcfg, resume=state, stop_after=stop_after,
                   on_checkpoint=snapshot, log_path=log_path)
    protocol = cfg.protocol if resume is None else ck.protocol
    final = result.state
    save_checkpoint(out / "checkpoint.zip", model, protocol, tcfg, final,
                    {"log_records": n_header + done + len(result.log)})
    if result.final_val is not None:
        ledger = count_parameters(model.registry)
        report.write_csv(out / "report.csv", report.REPORT_SCHEMA, report.REPORT_HEADER,
                         [report.report_row(protocol.kind, "val", ledger, result.final_val)])
    _write_json(out / "timing.json", {"seconds": round(time.time() - started, 3),
                                      "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S")})
    return TrainOutcome(out, lr, result.final_val, result.log)


# -- evaluate ------------------------------------------------------------------------------

def run_evaluate(cfg: ExperimentConfig, checkpoint: str, split: str = "val") -> dict:
    ck = load_checkpoint(checkpoint)
    model = restore_model(ck)
    corpus = load_corpus(cfg.data_dir)
    if split not in corpus.splits or len(corpus[split]) < 2:
        raise ConfigError(f"split {split!r} is missing or has fewer than 2 pairs")
    metrics = evaluate_split(model, corpus[split])
    ledger = count_parameters(model.registry)
    out = Path(checkpoint).parent
    report.write_csv(out / f"report-{split}.csv", report.REPORT_SCHEMA, report.REPORT_HEADER,
                     [report.report_row(ck.protocol.kind, split, ledger, metrics)])
    return metrics


# -- count-params -------------------------------------------------------------------------

def run_count_params(cfg: ExperimentConfig, protocols=None, out: Path | None = None) -> str:
    kinds = list(protocols or cfg.count_protocols)
    rows = []
    for kind in kinds:
        proto = Protocol(kind, cfg.protocol.adapter_hidden)
        rows.append(report.ledger_row(kind, ledger_for(cfg.model, proto, cfg.prompts)))
    text = report.render(report.LEDGER_SCHEMA, report.LEDGER_HEADER, rows)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    return text


# -- ablate -------------------------------------------------------------------------------

def default_values(axis: str, K: int, F: int) -> list:
    if axis == "depth":
        return [[K - n + 1, K] for n in range(1, K + 1)]
    if axis == "length":
        return [1, 2, 4, 8]
    if axis == "video_len":
        return [0, 1, 2, 4]
    if axis == "k_split":
        return list(range(0, K + 1, 2))
    return ["bilstm", "lstm", "transformer"]


def point_spec(base: PromptSpec, axis: str, value) -> PromptSpec:
    try:
        return _point_spec(base, axis, value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {axis} ablation value {value!r}: {e}") from None


def _point_spec(base: PromptSpec, axis: str, value) -> PromptSpec:
    if axis == "depth":
        if value is None:
            return dataclasses.replace(base, depth_range=None)
        lo, hi = value
        return dataclasses.replace(base, depth_range=(int(lo), int(hi)))
    if axis == "length":
        return dataclasses.replace(base, P_t=int(value), P_v=int(value),
                                   video_len=min(base.video_len, int(value)))
    if axis == "video_len":
        return dataclasses.replace(base, video_len=int(value))
    if axis == "k_split":
        return dataclasses.replace(base, K_s=int(value))
    return dataclasses.replace(base, cmm_kind=str(value))


def _value_key(value) -> str:
    return "-".join(str(v) for v in value) if isinstance(value, (list, tuple)) else str(value)


def _run_point(args) -> dict:
    cfg, axis, value, out, force = args
    pspec = point_spec(cfg.prompts, axis, value)
    res = run_train(cfg, force=force, out=out, prompts=pspec)
    model = build_model(cfg, pspec, backbone=None)
    row = {"axis": axis, "value": _value_key(value),
           "layers": pspec.resolved(cfg.model).depth_range[1] - pspec.resolved(cfg.model).depth_range[0] + 1,
           "params": count_parameters(model.registry).trainable_total,
           "lr": res.lr, "scale": report.BANNER}
    row.update(res.final_val or {})
    return row


def run_ablate(cfg: ExperimentConfig, axis: str | None = None, values=None, force: bool = False) -> Path:
    axis = axis or cfg.ablation.get("axis")
    if axis not in AXES:
        raise ConfigError(f"ablation axis must be one of {AXES}, got {axis!r}")
    if values is None:
        values = cfg.ablation.get("values") if cfg.ablation.get("axis") == axis else None
    if values is None:
        values = default_values(axis, cfg.model.K, cfg.model.F)
    values = list(values)
    if not values:
        raise ConfigError(f"ablation grid for axis {axis!r} is empty")
    if not cfg.protocol.is_prompt:
        raise ConfigError("ablation sweeps need a prompt protocol")
    for v in values:  # validate every point before spending compute
        point_spec(cfg.prompts, axis, v).resolved(cfg.model)
    root = Path(cfg.out) / "ablate" / axis
    if (root / "ablation.csv").exists() and not force:
        raise OutputExists(f"{root} already holds a sweep; pass --force to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, axis, v, root / _value_key(v), force) for v in values]
    workers = max(1, int(os.environ.get("VOPLAB_THREADS", "1") or 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            rows = list(ex.map(_run_point, jobs))
    else:
        rows = [_run_point(j) for j in jobs]
    if axis == "depth":
        rows.sort(key=lambda r: (r["layers"], r["value"]))
    report.write_csv(root / "ablation.csv", report.ABLATION_SCHEMA, report.ABLATION_HEADER, rows)
    return root / "ablation.csv"


__all__ = ["ExperimentConfig", "load_config", "run_generate", "run_train", "run_evaluate",
           "run_count_params", "run_ablate", "NonFiniteLoss", "OutputExists", "ConfigError"]
