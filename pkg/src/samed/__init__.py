"""LoRA customisation of a frozen promptless ViT segmenter, built on a small numpy autodiff core."""

from .lora import LoraLinear, LoraSpec
from .model import ModelConfig, SamedModel, count_parameters, customize, inject, predict_map
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "GradTape",
    "LoraLinear",
    "LoraSpec",
    "ModelConfig",
    "SamedModel",
    "Tensor",
    "count_parameters",
    "customize",
    "inject",
    "predict_map",
]
