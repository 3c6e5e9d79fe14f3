"""Seeded text-video corpus with a planted concept correspondence.

Every pair draws two distinct concepts ``(a, b)``. The caption lists both concept
tokens (``a`` before ``b``) among distractor tokens and ends with EOS. Each frame is
a mixture of the two concepts' low-frequency colour patterns plus Gaussian pixel
noise. Under ``drifting`` structure the mixture slides from ``a`` to ``b`` across
frames; under ``static`` it stays at one half each.

Token layout: ``0..n_concepts-1`` concepts, ``n_concepts..vocab-3`` distractors,
``vocab-2`` padding, ``vocab-1`` EOS.

Tensor files start with a 16-byte header (``b"VPT1"``, uint16 rank, five uint16
dims, little-endian) followed by float32 little-endian values in row-major order.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, _strict
from .encoders import TextBatch, VideoBatch
from .retrieval import ranks

MAGIC = b"VPT1"
HEADER = struct.Struct("<4sH5H")
FORMAT = "voplab-corpus/1"
SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 1, "val": 2, "test": 3}
COARSE = 3  # pattern grid side before upsampling


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    n_pairs: int = 256  # training pairs
    n_val: int = 64
    n_test: int = 0
    n_concepts: int = 16
    noise_std: float = 0.3
    N: int = 8
    F: int = 4
    image_side: int = 12
    patch: int = 4
    vocab: int = 64
    seed: int = 0
    world_seed: int = 0  # concept patterns; shared by corpora that should agree on meaning
    temporal_structure: str = "drifting"

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ConfigError(f"n_pairs must be >= 2 (contrastive loss needs negatives), got {self.n_pairs}")
        if self.n_val < 0 or self.n_test < 0:
            raise ConfigError("n_val and n_test must be >= 0")
        if self.n_val == 1 or self.n_test == 1:
            raise ConfigError("evaluation splits need 0 or >= 2 pairs")
        if self.n_concepts < 2:
            raise ConfigError("n_concepts must be >= 2")
        if self.n_concepts > self.vocab - 3:
            raise ConfigError(
                f"n_concepts {self.n_concepts} leaves no room for distractor/pad/EOS ids in vocab {self.vocab}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.N < 3:
            raise ConfigError("N must be >= 3 (two concept tokens plus EOS)")
        if self.F < 1 or self.image_side % self.patch:
            raise ConfigError("F must be >= 1 and image_side divisible by patch")
        if self.image_side % COARSE:
            raise ConfigError(f"image_side must be divisible by {COARSE}")
        if self.temporal_structure not in ("static", "drifting"):
            raise ConfigError("temporal_structure must be 'static' or 'drifting'")
        if max(self.n_pairs, self.n_val, self.n_test, self.image_side, self.N) > 65535:
            raise ConfigError("sizes must fit the uint16 tensor header")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return _strict(cls, d)

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_pairs, "val": self.n_val, "test": self.n_test}


@dataclass
class Split:
    name: str
    ids: np.ndarray
    text: TextBatch
    video: VideoBatch
    concepts: np.ndarray  # (n, 2) int

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Corpus:
    config: CorpusConfig
    splits: dict[str, Split]
    trajectory: np.ndarray  # (F,) weight of the second concept per frame

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def concept_patterns(cfg: CorpusConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.world_seed, 0])
    coarse = rng.standard_normal((cfg.n_concepts, 3, COARSE, COARSE))
    up = cfg.image_side // COARSE
    return np.kron(coarse, np.ones((1, 1, up, up)))


def trajectory(cfg: CorpusConfig) -> np.ndarray:
    if cfg.temporal_structure == "static" or cfg.F == 1:
        return np.full(cfg.F, 0.5)
    return np.arange(cfg.F) / (cfg.F - 1)


def _draw_concepts(rng, n: int, n_concepts: int, unique: bool) -> np.ndarray:
    pairs = [(a, b) for a in range(n_concepts) for b in range(n_concepts) if a < b]
    if unique and n <= len(pairs):
        pick = rng.choice(len(pairs), size=n, replace=False)
        out = np.array([pairs[i] for i in pick], dtype=np.int64).reshape(-1, 2)
    else:
        out = np.array([pairs[i] for i in rng.integers(0, len(pairs), size=n)],
                       dtype=np.int64).reshape(-1, 2)
    swap = rng.random(n) < 0.5
    out[swap] = out[swap][:, ::-1]
    return out


def _captions(rng, concepts: np.ndarray, cfg: CorpusConfig) -> tuple[np.ndarray, np.ndarray]:
    n = len(concepts)
    pad, eos = cfg.vocab - 2, cfg.vocab - 1
    ids = np.full((n, cfg.N), pad, dtype=np.int64)
    eos_index = rng.integers(2, cfg.N, size=n)  # caption body length before EOS
    distractor_lo = cfg.n_concepts
    for i in range(n):
        L = int(eos_index[i])
        body = rng.integers(distractor_lo, cfg.vocab - 2, size=L)
        slots = np.sort(rng.choice(L, size=2, replace=False))
        body[slots] = concepts[i]
        ids[i, :L] = body
        ids[i, L] = eos
    return ids, eos_index


def _frames(rng, concepts: np.ndarray, cfg: CorpusConfig, patterns: np.ndarray) -> np.ndarray:
    w = trajectory(cfg)[None, :, None, None, None]
    a = patterns[concepts[:, 0]][:, None]
    b = patterns[concepts[:, 1]][:, None]
    clean = (1.0 - w) * a + w * b
    noise = rng.standard_normal(clean.shape) * cfg.noise_std
    return (clean + noise).astype(np.float32)


def generate(cfg: CorpusConfig) -> Corpus:
    patterns = concept_patterns(cfg)
    splits = {}
    start = 0
    for name in SPLITS:
        n = cfg.split_sizes()[name]
        rng = np.random.default_rng([cfg.seed, _SPLIT_CODE[name]])
        concepts = _draw_concepts(rng, n, cfg.n_concepts, unique=name != "train")
        ids, eos_index = _captions(rng, concepts, cfg)
        frames = _frames(rng, concepts, cfg, patterns)
        splits[name] = Split(name, np.arange(start, start + n), TextBatch(ids, eos_index),
                             VideoBatch(frames), concepts)
        start += n
    return Corpus(cfg, splits, trajectory(cfg))


# -- planted-matching oracle --------------------------------------------------------

def oracle_similarity(split: Split, cfg: CorpusConfig) -> np.ndarray:
    """Least-squares concept read-out of every frame, compared with the caption's concepts."""
    patterns = concept_patterns(cfg).reshape(cfg.n_concepts, -1)
    frames = split.video.frames.reshape(len(split), cfg.F, -1).astype(np.float64)
    coef, *_ = np.linalg.lstsq(patterns.T, frames.reshape(-1, patterns.shape[1]).T, rcond=None)
    video_vec = coef.T.reshape(len(split), cfg.F, cfg.n_concepts).mean(axis=1)
    text_vec = np.zeros((len(split), cfg.n_concepts))
    ids = split.text.token_ids
    for i in range(len(split)):
        toks = ids[i, : split.text.eos_index[i]]
        toks = toks[toks < cfg.n_concepts]
        text_vec[i, toks] = 1.0 / len(toks)
    d = ((text_vec[:, None, :] - video_vec[None, :, :]) ** 2).sum(-1)
    return -d


def oracle_recall_at_1(split: Split, cfg: CorpusConfig) -> float:
    r = ranks(oracle_similarity(split, cfg), "t2v")
    return 100.0 * float(np.mean(r == 1))


# -- on-disk format ----------------------------------------------------------------

def write_tensor(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim > 5:
        raise CorpusError(f"rank {arr.ndim} exceeds the 5 dims the header can hold")
    dims = list(arr.shape) + [0] * (5 - arr.ndim)
    if any(d > 65535 for d in dims):
        raise CorpusError(f"dimension in {arr.shape} exceeds uint16")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, arr.ndim, *dims))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise CorpusError(f"{path}: truncated header")
    magic, rank, *dims = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}")
    if rank > 5:
        raise CorpusError(f"{path}: rank {rank} > 5")
    shape = tuple(dims[:rank])
    count = int(np.prod(shape)) if rank else 1
    body = raw[HEADER.size:]
    if len(body) != 4 * count:
        raise CorpusError(f"{path}: payload has {len(body)} bytes, header implies {4 * count}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class OutputExists(FileExistsError):
    pass


def write_corpus(corpus: Corpus, out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise OutputExists(f"{out} already holds a corpus; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    cfg = corpus.config
    manifest = {"format": FORMAT, "config": cfg.to_dict(),
                "trajectory": [float(w) for w in corpus.trajectory],
                "token_layout": {"concepts": [0, cfg.n_concepts - 1],
                                 "distractors": [cfg.n_concepts, cfg.vocab - 3],
                                 "pad": cfg.vocab - 2, "eos": cfg.vocab - 1},
                "splits": {}}
    for name, split in corpus.splits.items():
        files = {}
        arrays = {"tokens": split.text.token_ids, "eos_index": split.text.eos_index,
                  "frames": split.video.frames, "concepts": split.concepts}
        for key, arr in arrays.items():
            rel = f"{name}.{key}.vpt"
            write_tensor(out / rel, arr)
            files[key] = {"path": rel, "shape": list(np.shape(arr)), "sha256": _sha256(out / rel)}
        manifest["splits"][name] = {
            "ids": [int(i) for i in split.ids],
            "files": files,
            "pairs": [{"id": int(i), "concepts": [int(a), int(b)]}
                      for i, (a, b) in zip(split.ids, split.concepts)],
        }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, manifest_path)
    return out


def dataset_hash(path) -> str:
    """Hash of the manifest, which itself pins every payload checksum."""
    return _sha256(Path(path) / "manifest.json")


def load_corpus(path, verify: bool = True) -> Corpus:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CorpusError(f"no manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CorpusError(f"{mpath}: unsupported format {manifest.get('format')!r}")
    cfg = CorpusConfig.from_dict(manifest["config"])
    splits = {}
    for name, entry in manifest["splits"].items():
        arrays = {}
        for key, meta in entry["files"].items():
            fp = path / meta["path"]
            if verify and _sha256(fp) != meta["sha256"]:
                raise CorpusError(f"checksum mismatch for {fp}")
            arrays[key] = read_tensor(fp)
        ids = np.asarray(entry["ids"], dtype=np.int64)
        splits[name] = Split(
            name, ids,
            TextBatch(np.rint(arrays["tokens"]).astype(np.int64),
                      np.rint(arrays["eos_index"]).astype(np.int64)),
            VideoBatch(arrays["frames"]),
            np.rint(arrays["concepts"]).astype(np.int64),
        )
    return Corpus(cfg, splits, np.asarray(manifest["trajectory"]))
