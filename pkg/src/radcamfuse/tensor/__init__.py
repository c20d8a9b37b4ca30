from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import (NonFiniteError, Tensor, as_tensor, get_dtype, grad_enabled, no_grad, precision,
                   set_precision)
from .gradcheck import grad_check, weighted
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, Parameter

__all__ = [
    "ops", "Tensor", "Parameter", "Module", "Linear", "Conv2d", "MLP", "LayerNorm",
    "as_tensor", "no_grad", "precision", "set_precision", "get_dtype", "grad_enabled",
    "NonFiniteError", "grad_check", "weighted", "save_checkpoint", "load_checkpoint",
    "CheckpointError",
]
