"""Multimodal co-attention network for four-way visual commonsense questions.

The package is a complete, dependency-light stack: a small reverse-mode
tensor library, attention and recurrent building blocks, the grounded
co-attention model, a deterministic trainer, and a CLI for synthetic data,
training, evaluation, gradient checking, and attention-trace export.
"""

from vcrnet.config import ConfigError, TrainConfig
from vcrnet.data import (
    TASK_Q2A,
    TASK_QA2R,
    DataError,
    TaggedToken,
    VcrInstance,
    Vocab,
    synth_generate,
)
from vcrnet.model import VcrModel
from vcrnet.tensor import ShapeError, Tape, Tensor
from vcrnet.training import TrainingDiverged, evaluate, load_run, train

__all__ = [
    "ConfigError",
    "DataError",
    "ShapeError",
    "TASK_Q2A",
    "TASK_QA2R",
    "TaggedToken",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "VcrInstance",
    "VcrModel",
    "Vocab",
    "evaluate",
    "load_run",
    "synth_generate",
    "train",
]
