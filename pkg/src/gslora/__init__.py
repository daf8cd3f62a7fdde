"""Continual class forgetting with group-sparse LoRA adapters on a small numpy transformer."""

__version__ = "0.1.0"

from . import autodiff, data, engine, io, lora, metrics, model, objective, optim, rng
from ._kernels import BACKEND
from .data import SyntheticDatasetConfig, generate_dataset
from .engine import ForgettingTask, LoraConfig, init_state, run_schedule, run_task
from .lora import GroupingStrategy, attach, merge
from .metrics import MetricsRecord, h_mean
from .model import ModelConfig, TrainingError, init_model, pretrain
from .objective import ObjectiveConfig, default_bnd
from .optim import OptimizerConfig

__all__ = [
    "BACKEND",
    "ForgettingTask",
    "GroupingStrategy",
    "LoraConfig",
    "MetricsRecord",
    "ModelConfig",
    "ObjectiveConfig",
    "OptimizerConfig",
    "SyntheticDatasetConfig",
    "TrainingError",
    "attach",
    "autodiff",
    "data",
    "default_bnd",
    "engine",
    "generate_dataset",
    "h_mean",
    "init_model",
    "init_state",
    "io",
    "lora",
    "merge",
    "metrics",
    "model",
    "objective",
    "optim",
    "pretrain",
    "rng",
    "run_schedule",
    "run_task",
]
