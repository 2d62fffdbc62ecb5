"""Dense tensors with reverse-mode automatic differentiation.

Every backward rule is written in terms of the same differentiable
primitives defined here, so running a backward pass with
``create_graph=True`` records a new graph that can itself be
differentiated (gradient of a gradient).
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError, NumericError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class _GradMode(threading.local):
    enabled = True
    check_finite = True


_mode = _GradMode()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _mode.enabled
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


@contextlib.contextmanager
def enable_grad(flag: bool = True):
    prev = _mode.enabled
    _mode.enabled = flag
    try:
        yield
    finally:
        _mode.enabled = prev


def is_grad_enabled() -> bool:
    return _mode.enabled


class Tensor:
    """An immutable array value plus the node that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def astype(self, dtype) -> "Tensor":
        return cast(self, dtype)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor that always requires grad."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = "", dtype=None):
        super().__init__(value.data if isinstance(value, Tensor) else value, True, dtype)
        self.name = name

    @property
    def value(self) -> Tensor:
        return self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _make(arr: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if _mode.check_finite and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")
    req = _mode.enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, req)
    if req:
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _sum_to_shape(arr: np.ndarray, shape: tuple) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and arr.shape[i + lead] != 1
    )
    out = arr.sum(axis=axes, keepdims=True) if axes else arr
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(_sum_to_shape(a.data, shape), (a,), lambda g: (broadcast_to(g, a.shape),), "sum_to")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        arr = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _make(arr, (a,), lambda g: (sum_to(g, a.shape),), "broadcast_to")


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    return a, b


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("division by zero")

    def bw(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise ContractError("power() takes a scalar exponent")
    p = float(p)
    if p == 1.0:
        return a

    def bw(g):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(a.data ** p, (a,), bw, "power")


def exp(a: Tensor) -> Tensor:
    holder = []
    out = _make(np.exp(a.data), (a,), lambda g: (mul(g, holder[0]),), "exp")
    holder.append(out)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)
    return _make(a.data * mask, (a,), lambda g: (mul(g, Tensor._wrap(mask)),), "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * factor, (a,), lambda g: (mul(g, Tensor._wrap(factor)),), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    holder = []

    def bw(g):
        s_t = holder[0]
        return (mul(g, mul(s_t, sub(1.0, s_t))),)

    out = _make(s, (a,), bw, "sigmoid")
    holder.append(out)
    return out


def tanh(a: Tensor) -> Tensor:
    holder = []

    def bw(g):
        t = holder[0]
        return (mul(g, sub(1.0, mul(t, t))),)

    out = _make(np.tanh(a.data), (a,), bw, "tanh")
    holder.append(out)
    return out


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    src = a.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (cast(g, src),), "cast")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        arr = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    if arr.shape == a.shape:
        return a
    return _make(arr, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % a.ndim for x in axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; backward scatters with accumulation."""
    arr = a.data[idx]
    return _make(np.array(arr), (a,), lambda g: (scatter(g, a.shape, idx),), "index")


def scatter(g: Tensor, shape: tuple, idx) -> Tensor:
    """Zeros of ``shape`` with ``g`` accumulated at ``idx``; adjoint of index()."""
    z = np.zeros(shape, dtype=g.dtype)
    np.add.at(z, idx, g.data)
    return _make(z, (g,), lambda gg: (index(gg, idx),), "scatter")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[u.shape for u in tensors]} disagree off-axis"
            )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        outs = []
        for k in range(len(tensors)):
            sl = [slice(None)] * nd
            sl[axis] = slice(int(bounds[k]), int(bounds[k + 1]))
            outs.append(index(g, tuple(sl)))
        return tuple(outs)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis % (t.ndim + 1)
        shape.insert(ax, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape}[-1]={a.shape[-1]} vs {b.shape}[-2]={b.shape[-2]}"
        )

    def bw(g):
        ga = sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swapaxes(a, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def norm(a: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    axes = _norm_axes(axis, a.ndim)
    n = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=True))
    kept_shape = n.shape
    holder = []

    def bw(g):
        out_k = reshape(holder[0], kept_shape)
        safe = add(out_k, Tensor._wrap((out_k.data == 0).astype(a.dtype)))
        return (mul(reshape(g, kept_shape), div(a, safe)),)

    out_arr = n if keepdims else n.reshape(tuple(s for i, s in enumerate(a.shape) if i not in axes))
    out = _make(out_arr, (a,), bw, "norm")
    holder.append(out)
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[b, n, :] = a[b, idx[b, n], :] for a of shape (B, M, C)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"gather_rows: incompatible shapes {a.shape} and index {idx.shape}")
    batch = np.arange(a.shape[0])[:, None]
    return index(a, (batch, idx))


# ---------------------------------------------------------------------------
# convolution primitives (adjoint pair)
# ---------------------------------------------------------------------------

def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col_np(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im_np(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    """Unfold (n, c, h, w) into (n, c*kh*kw, h'*w') patch columns."""
    shape = x.shape
    return _make(
        _im2col_np(x.data, kh, kw, stride, pad),
        (x,),
        lambda g: (col2im(g, shape, kh, kw, stride, pad),),
        "im2col",
    )


def col2im(cols: Tensor, x_shape: tuple, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    """Fold patch columns back, summing overlaps; adjoint of im2col()."""
    return _make(
        _col2im_np(cols.data, x_shape, kh, kw, stride, pad),
        (cols,),
        lambda g: (im2col(g, kh, kw, stride, pad),),
        "col2im",
    )


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the nodes reachable from a root.

    ``run`` replays the backward rules in reverse order, visiting each
    recorded node exactly once.  With ``higher_order`` the rules execute
    with graph recording enabled, so the produced gradients form a new
    differentiable graph.
    """

    def __init__(self, root: Tensor, higher_order: bool = False):
        self.root = root
        self.higher_order = higher_order
        self.nodes = self._toposort(root)
        self.visits = 0

    @staticmethod
    def _toposort(root: Tensor) -> list:
        order, seen = [], set()
        if not root.requires_grad:
            return order
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def run(self, seed: Tensor, targets: Iterable[Tensor] = ()) -> dict:
        """Return {id(tensor): grad} for every leaf and every tensor in ``targets``."""
        keep = {id(t) for t in targets}
        grads = {id(self.root): seed}
        result = {}
        with enable_grad(self.higher_order):
            for node in reversed(self.nodes):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                self.visits += 1
                if node.is_leaf or id(node) in keep:
                    result[id(node)] = g
                if node.is_leaf:
                    continue
                for p, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
        return result


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         seed: Optional[Tensor] = None) -> list:
    """Gradients of a scalar ``output`` w.r.t. ``inputs`` (None where unreachable)."""
    if seed is None:
        if output.size != 1:
            raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
        seed = Tensor._wrap(np.ones(output.shape, dtype=output.dtype))
    inputs = list(inputs)
    tape = Tape(output, higher_order=create_graph)
    res = tape.run(seed, inputs)
    out = []
    for t in inputs:
        g = res.get(id(t))
        if g is not None and not create_graph:
            g = g.detach()
        out.append(g)
    return out


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss, higher_order=create_graph)
    seed = Tensor._wrap(np.ones(loss.shape, dtype=loss.dtype))
    res = tape.run(seed)
    leaves = {id(n): n for n in tape.nodes if n.is_leaf}
    for key, g in res.items():
        leaf = leaves.get(key)
        if leaf is None:
            continue
        if not create_graph:
            g = g.detach()
        leaf.grad = g if leaf.grad is None else add(leaf.grad, g)
