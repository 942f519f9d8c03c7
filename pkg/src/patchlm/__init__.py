"""patchlm: desk-scale LM pretraining with patch-compressed two-stage training.

Stage one feeds the model sequences of patches (each the mean embedding of K
consecutive tokens) and scores a single shared prediction against all K
tokens of the next patch. Stage two transfers the parameters unchanged and
continues ordinary next-token training, recovering the inference mode at a
fraction lambda/K + (1 - lambda) of the all-token compute.
"""

from .config import DataConfig, RunConfig, TrainConfig, load_config
from .model import ModelConfig, TransformerParams, forward, init_params, param_count
from .patching import PatchConfig
from .tensor import Tape, Tensor, backward
from .trainer import (TrainPlan, Trainer, cost_ratio, epoch_plan, flops_estimate,
                      train_run, transfer)

__all__ = [
    "DataConfig",
    "RunConfig",
    "TrainConfig",
    "load_config",
    "ModelConfig",
    "TransformerParams",
    "forward",
    "init_params",
    "param_count",
    "PatchConfig",
    "Tape",
    "Tensor",
    "backward",
    "TrainPlan",
    "Trainer",
    "cost_ratio",
    "epoch_plan",
    "flops_estimate",
    "train_run",
    "transfer",
]

__version__ = "0.1.0"
