"""Layer-level operations composed from the differentiable primitives."""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import DimensionError
from .tensor import (
    Tensor,
    add,
    col2im,
    div,
    exp,
    im2col,
    matmul,
    reshape,
    sub,
    swapaxes,
    tsum,
    broadcast_to,
)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct (im2col) 2-D cross-correlation of (n, c_in, h, w) with (c_out, c_in, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(f"conv2d channel axis mismatch: input axis 1 = {c_in}, kernel axis 1 = {kc}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad} (axes 2, 3)"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = im2col(x, kh, kw, stride, pad)
    out = matmul(reshape(kernel, (c_out, c_in * kh * kw)), cols)
    out = reshape(out, (n, c_out, ho, wo))
    if bias is not None:
        out = add(out, reshape(bias, (1, c_out, 1, 1)))
    return out


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; kernel shape (c_in, c_out, kh, kw).

    Output size is (h - 1) * stride - 2 * pad + kh, the exact adjoint of conv2d.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects rank-4 tensors, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = x.shape
    kc, c_out, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(f"conv_transpose2d channel axis mismatch: input axis 1 = {c_in}, kernel axis 0 = {kc}")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (w - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d output would be empty ({ho}x{wo})")
    wmat = swapaxes(reshape(kernel, (c_in, c_out * kh * kw)), 0, 1)
    cols = matmul(wmat, reshape(x, (n, c_in, h * w)))
    out = col2im(cols, (n, c_out, ho, wo), kh, kw, stride, pad)
    if bias is not None:
        out = add(out, reshape(bias, (1, c_out, 1, 1)))
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (n, c, h, w)."""
    n, c, h, w = x.shape
    y = broadcast_to(reshape(x, (n, c, h, 1, w, 1)), (n, c, h, 2, w, 2))
    return reshape(y, (n, c, 2 * h, 2 * w))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the trailing axis: x @ weight + bias, weight of shape (c, k)."""
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be rank 2, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear trailing dimension {x.shape[-1]} does not match weight rows {weight.shape[0]}"
        )
    lead = x.shape[:-1]
    flat = reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
    out = matmul(flat, weight)
    out = reshape(out, lead + (weight.shape[1],))
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
        out = add(out, bias)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shift = Tensor._wrap(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis, keepdims=True))
