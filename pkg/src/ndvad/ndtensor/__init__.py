"""Minimal dense-tensor core with reverse-mode (and higher-order) autodiff."""
from .tensor import (
    Parameter,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    cast,
    col2im,
    concat,
    div,
    enable_grad,
    exp,
    gather_rows,
    grad,
    im2col,
    index,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    norm,
    power,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    sum_to,
    swapaxes,
    tanh,
    transpose,
    tsum,
)
from .functional import conv2d, conv_transpose2d, linear, softmax, upsample2x
from .gradcheck import grad_check, numeric_grad
from . import checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
