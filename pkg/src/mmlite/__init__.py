"""Lite convolution + selective state-space image classifiers on a numpy tape."""
from .accounting import compare_savings, count_flops, count_params, memory_fit
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, ModelConfig, resolve_config
from .data import DatasetSpec, synth_dataset
from .distill import distill_run, evaluate, kd_loss, train, train_step
from .model import Model, build_model, model_forward
from .tensor import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec", "Model", "ModelConfig", "PRESETS", "Tape", "Tensor", "build_model", "compare_savings",
    "count_flops", "count_params", "distill_run", "evaluate", "grad_check", "kd_loss", "load_checkpoint",
    "memory_fit", "model_forward", "resolve_config", "save_checkpoint", "synth_dataset", "train", "train_step",
]
