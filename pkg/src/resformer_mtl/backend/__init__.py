"""Minimal numpy tensor library with reverse-mode autodiff."""
from . import ops
from .ops import (
    batch_norm,
    concat,
    conv2d,
    gelu,
    global_avg_pool,
    layer_norm,
    linear,
    max_pool2d,
    relu,
    sigmoid,
    softmax,
    upsample_bilinear2x,
)
from .tensor import (
    DEFAULT_DTYPE,
    Parameter,
    RngState,
    ShapeError,
    Tensor,
    as_tensor,
    is_grad_enabled,
    no_grad,
)

__all__ = [
    "DEFAULT_DTYPE",
    "Parameter",
    "RngState",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "batch_norm",
    "concat",
    "conv2d",
    "gelu",
    "global_avg_pool",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "max_pool2d",
    "no_grad",
    "ops",
    "relu",
    "sigmoid",
    "softmax",
    "upsample_bilinear2x",
]
