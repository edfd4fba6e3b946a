"""Dense float64 autodiff substrate used by every model component."""

from . import functional
from .optim import adam_step, clip_grad_norm, global_grad_norm, zero_grad
from .tensor import Parameter, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "functional",
    "adam_step",
    "zero_grad",
    "clip_grad_norm",
    "global_grad_norm",
]
