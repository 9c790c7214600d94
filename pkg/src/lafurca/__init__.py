"""Dual-path BiLSTM time-domain source separation on a small numpy autodiff core."""

from .objective import multistage_loss, pit_loss, si_sdr
from .separator import LaFurca, ModelSpec, parse_model_spec
from .tensor import Tape, Tensor
from .trainer import TrainConfig, Trainer

__all__ = [
    "LaFurca",
    "ModelSpec",
    "parse_model_spec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "si_sdr",
    "pit_loss",
    "multistage_loss",
]

__version__ = "0.1.0"
