"""Minimal numpy tensor engine with tape-based reverse-mode differentiation."""

from . import ops
from .core import (
    GraphError,
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    reset_graph,
    set_default_dtype,
)
from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import Linear, LayerNorm, MLP, Module, MultiHeadAttention, Parameter, attention, fourier_features
from .ops import (
    bilinear_matrix,
    bilinear_sample_2d,
    concat,
    conv3d,
    cross_entropy,
    gelu,
    layer_norm,
    log_softmax_lastdim,
    matmul,
    silu,
    softmax_lastdim,
    stop_gradient,
)
from .optim import AdamW, WarmupCosine, clip_grad_norm

__all__ = [
    "AdamW", "GraphError", "LayerNorm", "Linear", "MLP", "Module", "MultiHeadAttention",
    "NonFiniteError", "Parameter", "Tape", "Tensor", "WarmupCosine", "as_tensor", "attention",
    "backward", "bilinear_matrix", "bilinear_sample_2d", "check_gradients", "clip_grad_norm",
    "concat", "conv3d", "cross_entropy", "current_tape", "default_dtype", "fourier_features",
    "gelu", "is_grad_enabled", "layer_norm", "log_softmax_lastdim", "matmul", "no_grad",
    "numerical_grad", "ops", "precision", "relative_error", "reset_graph", "set_default_dtype",
    "silu", "softmax_lastdim", "stop_gradient",
]
