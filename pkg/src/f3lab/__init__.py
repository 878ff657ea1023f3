"""Attention-guided adversarial purification on a toy vision-language model."""
from .autodiff import Tape, Tensor, backward, grad_check
from .model import ModelConfig, ToyVLM, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "grad_check", "ModelConfig", "ToyVLM",
           "load_checkpoint", "save_checkpoint", "train", "__version__"]
