"""Self-contained neural-network core: tape autodiff, MLPs, Adam, checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, analytic_gradients, finite_difference_gradients, gradient_check
from .mlp import Mlp
from .optim import AdamState, adam_step, ema_update, zero_grads
from .tensor import (
    Tensor,
    clip,
    concat,
    gelu,
    gelu_np,
    gelu_value_and_tangent,
    layer_norm,
    matmul,
    parameter,
    slice_cols,
    texp,
    tlog,
    tmean,
    tsum,
)

__all__ = [
    "AdamState",
    "CheckpointError",
    "GradCheckReport",
    "Mlp",
    "Tensor",
    "adam_step",
    "analytic_gradients",
    "clip",
    "concat",
    "ema_update",
    "finite_difference_gradients",
    "gelu",
    "gelu_np",
    "gelu_value_and_tangent",
    "gradient_check",
    "layer_norm",
    "load_checkpoint",
    "matmul",
    "parameter",
    "save_checkpoint",
    "slice_cols",
    "texp",
    "tlog",
    "tmean",
    "tsum",
    "zero_grads",
]
