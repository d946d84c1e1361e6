"""Expire-Span: learned per-memory expiration for a block-recurrent decoder."""

from .expire_span import (
    ConfigError,
    DegenerateAttentionError,
    MemoryBank,
    SpanPredictor,
    aux_span_loss,
    predict_span,
    prune,
    remaining_span,
    renormalize_attention,
    soft_mask,
)
from .training import NumericHalt, TrainConfig, evaluate, train_loop
from .transformer import Model, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateAttentionError",
    "MemoryBank",
    "Model",
    "ModelConfig",
    "NumericHalt",
    "SpanPredictor",
    "TrainConfig",
    "aux_span_loss",
    "evaluate",
    "predict_span",
    "prune",
    "remaining_span",
    "renormalize_attention",
    "soft_mask",
    "train_loop",
]
