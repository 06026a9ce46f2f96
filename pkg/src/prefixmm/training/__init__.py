"""Optimizer, schedule, training loop, checkpoints and evaluation."""

from .checkpoint import load_model, read_checkpoint, restore_trainer, save_checkpoint, save_model
from .evaluate import caption, evaluate, paint
from .metrics import corpus_bleu
from .optim import AdamW, NonFiniteGradientError, adamw_step, lr_at, warmup_steps
from .trainer import (
    TrainConfig,
    Trainer,
    TrainingAborted,
    TrainingData,
    build_model,
    format_log_line,
    log_header,
    prepare_data,
    read_log,
)

__all__ = [
    "AdamW",
    "NonFiniteGradientError",
    "TrainConfig",
    "Trainer",
    "TrainingAborted",
    "TrainingData",
    "adamw_step",
    "build_model",
    "caption",
    "corpus_bleu",
    "evaluate",
    "format_log_line",
    "load_model",
    "log_header",
    "lr_at",
    "paint",
    "prepare_data",
    "read_checkpoint",
    "read_log",
    "restore_trainer",
    "save_checkpoint",
    "save_model",
    "warmup_steps",
]
