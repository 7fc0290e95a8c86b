"""From-scratch numpy implementation of the MPSI super-resolution network and its tooling."""

from .config import Ablation, ModelConfig, SsmConfig
from .model import MPSI, build_model, load_model, save_model, super_resolve
from .tensor import ConfigError, Parameter, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Ablation",
    "ConfigError",
    "MPSI",
    "ModelConfig",
    "Parameter",
    "ShapeError",
    "SsmConfig",
    "Tensor",
    "build_model",
    "load_model",
    "no_grad",
    "save_model",
    "super_resolve",
]
