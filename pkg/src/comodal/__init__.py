"""Multimodal co-training with knowledge transfer into unimodal branches.

Numpy-only reverse-mode autodiff, the layers and cross-modal transformer
built on it, the co-training objective, a trainer with per-branch model
selection, and a small CLI.
"""

from .config import ExperimentConfig, default_config, parse_config
from .errors import (
    CapabilityError,
    CheckpointFormatError,
    ComodalError,
    ConfigError,
    ContractError,
    DivergenceError,
    ModalityLookupError,
    ParameterError,
    ShapeError,
)
from .model import CoTrainModel, build_model, build_unimodal, extract_unimodal, forward_all
from .objectives import kt_attention, kt_decision, kt_feature, total_loss
from .tensor import Tensor, backward, detach, no_grad
from .trainer import evaluate, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "default_config",
    "parse_config",
    "CapabilityError",
    "CheckpointFormatError",
    "ComodalError",
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "ModalityLookupError",
    "ParameterError",
    "ShapeError",
    "CoTrainModel",
    "build_model",
    "build_unimodal",
    "extract_unimodal",
    "forward_all",
    "kt_attention",
    "kt_decision",
    "kt_feature",
    "total_loss",
    "Tensor",
    "backward",
    "detach",
    "no_grad",
    "evaluate",
    "run_ablation",
    "train",
]
