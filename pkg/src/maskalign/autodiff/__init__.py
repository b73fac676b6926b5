"""Reverse-mode automatic differentiation over float64 tensors."""

from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import finite_difference, relative_error
from .optim import OptimizerState, adamw_step, clip_grad_norm, global_grad_norm
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    add_bias,
    clamp,
    concat,
    div,
    exp,
    index,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale_rows,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    sqrt,
    square,
    stack_scalars,
    sub,
    sum,
    take_rows,
    tanh,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
