"""synres: a desk-scale transformer language model with synaptic-resonance
gating — per-layer trainable matrices that map attention outputs to sigmoid
relevance gates — plus the training loop and measurement surface around it."""

from .datagen import Batch, TaskSpec, VocabLayout
from .model import GateMode, ModelConfig, Params, count_flops, forward, init_params, resonance_gate
from .numcore import GradGraph, NumericError, Rng, Tensor2, backward, grad_check
from .train import EpochReport, TrainConfig, TrainResult, run_training

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "EpochReport",
    "GateMode",
    "GradGraph",
    "ModelConfig",
    "NumericError",
    "Params",
    "Rng",
    "TaskSpec",
    "Tensor2",
    "TrainConfig",
    "TrainResult",
    "VocabLayout",
    "backward",
    "count_flops",
    "forward",
    "grad_check",
    "init_params",
    "resonance_gate",
    "run_training",
    "__version__",
]
