"""Video-text prompt tuning on a miniature CLIP-style dual encoder."""
from .config import ConfigError, ModelSpec, PromptSpec, Protocol, TrainConfig, clip_b32, toy
from .corpus import CorpusConfig, generate
from .encoders import DualEncoder, TextBatch, VideoBatch
from .protocols import apply_protocol, count_parameters, ledger_for
from .retrieval import evaluate, metrics, ranks
from .trainer import contrastive_loss, cosine_lr, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ModelSpec", "PromptSpec", "Protocol", "TrainConfig", "clip_b32", "toy",
    "CorpusConfig", "generate", "DualEncoder", "TextBatch", "VideoBatch", "apply_protocol",
    "count_parameters", "ledger_for", "evaluate", "metrics", "ranks", "contrastive_loss",
    "cosine_lr", "train",
]
