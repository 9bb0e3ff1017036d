"""Minimal reverse-mode autodiff engine used by every network in the package."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, check_gradients_sampled, relative_error
from .optim import Adam, AdamState, NonFiniteGradient, adam_step, clip_global_norm, global_norm
from .tensor import ShapeError, Tensor, backward, grad, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "NonFiniteGradient",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "check_gradients",
    "check_gradients_sampled",
    "clip_global_norm",
    "global_norm",
    "grad",
    "is_grad_enabled",
    "load_checkpoint",
    "no_grad",
    "relative_error",
    "save_checkpoint",
]
