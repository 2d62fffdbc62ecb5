"""Convolutional frame-prediction autoencoder split at a configurable plug spot.

Layer layout for ``S = len(stage_channels)`` stages::

    down0 .. down{S-1}     3x3 stride-2 convs          (h0 -> h0 / 2**S)
    up0 .. up{S-1}         2x nearest upsample + 3x3    (back to h0)
    refine                 3x3 conv at full resolution
    head                   3x3 conv to frame channels, tanh

``plug_stage`` counts the hidden decoder layers backwards from the output:
1 is ``refine``, 2 is ``up{S-1}``, ..., ``S + 1`` is ``up0``.  Every layer up
to and including the plug layer belongs to the encoder (``enc.*``); the
rest is the decoder (``dec.*``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .ndtensor import Parameter, Tensor, conv2d, grad, leaky_relu, no_grad, tanh, upsample2x

Params = Dict[str, Parameter]


@dataclass
class AEConfig:
    input_frames: int = 4
    frame_size: Tuple[int, int] = (64, 64)
    frame_channels: int = 1
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    plug_stage: int = 3
    kernel: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.validate()

    def validate(self) -> None:
        if self.input_frames < 1:
            raise ConfigError("input_frames must be >= 1")
        if len(self.frame_size) != 2 or min(self.frame_size) < 1:
            raise ConfigError(f"frame_size must be two positive ints, got {self.frame_size}")
        if self.frame_channels < 1:
            raise ConfigError("frame_channels must be >= 1")
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ConfigError("stage_channels must be a non-empty list of positive ints")
        div = 2 ** len(self.stage_channels)
        for axis, size in zip("hw", self.frame_size):
            if size % div:
                raise ConfigError(
                    f"frame_size: {axis}={size} not divisible by 2**{len(self.stage_channels)} "
                    f"(stage_channels has {len(self.stage_channels)} down stages)"
                )
        if not 1 <= self.plug_stage <= len(self.stage_channels) + 1:
            raise ConfigError(
                f"plug_stage={self.plug_stage} does not address a decoder layer "
                f"(valid: 1..{len(self.stage_channels) + 1})"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be a positive odd int")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def in_channels(self) -> int:
        return self.input_frames * self.frame_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        d["stage_channels"] = list(self.stage_channels)
        return d


@dataclass(frozen=True)
class _Layer:
    name: str
    c_in: int
    c_out: int
    stride: int = 1
    upsample: bool = False
    head: bool = False


def layer_plan(config: AEConfig) -> List[_Layer]:
    ch = config.stage_channels
    s = len(ch)
    layers = []
    prev = config.in_channels
    for i, c in enumerate(ch):
        layers.append(_Layer(f"down{i}", prev, c, stride=2))
        prev = c
    for i in range(s):
        out = ch[s - 2 - i] if i < s - 1 else ch[0]
        layers.append(_Layer(f"up{i}", prev, out, upsample=True))
        prev = out
    layers.append(_Layer("refine", prev, ch[0]))
    layers.append(_Layer("head", ch[0], config.frame_channels, head=True))
    return layers


def plug_index(config: AEConfig) -> int:
    """Index in layer_plan() of the layer whose output feeds the DPU."""
    s = len(config.stage_channels)
    return 2 * s + 1 - config.plug_stage


def plug_shape(config: AEConfig) -> Tuple[int, int, int]:
    """(c, h, w) of the encoding map at the plug spot."""
    k = config.plug_stage
    h0, w0 = config.frame_size
    if k == 1:
        return config.stage_channels[0], h0, w0
    scale = 2 ** (k - 2)
    return layer_plan(config)[plug_index(config)].c_out, h0 // scale, w0 // scale


def _split(config: AEConfig):
    plan = layer_plan(config)
    cut = plug_index(config) + 1
    return plan[:cut], plan[cut:]


def _pname(prefix: str, layer: _Layer, what: str) -> str:
    return f"{prefix}.{layer.name}.{what}"


def build(config: AEConfig, seed: int = 0) -> Params:
    """Deterministic fan-in scaled uniform initialization; biases start at zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    k = config.kernel
    params: Params = {}
    enc, dec = _split(config)
    for prefix, layers in (("enc", enc), ("dec", dec)):
        for layer in layers:
            fan_in = layer.c_in * k * k
            gain = 3.0 if layer.head else 6.0
            bound = np.sqrt(gain / fan_in)
            w = rng.uniform(-bound, bound, size=(layer.c_out, layer.c_in, k, k)).astype(dtype)
            params[_pname(prefix, layer, "w")] = Parameter(w, _pname(prefix, layer, "w"))
            b = np.zeros(layer.c_out, dtype=dtype)
            params[_pname(prefix, layer, "b")] = Parameter(b, _pname(prefix, layer, "b"))
    return params


def encoder_params(params) -> dict:
    return {k: v for k, v in params.items() if k.startswith("enc.")}


def decoder_params(params) -> dict:
    return {k: v for k, v in params.items() if k.startswith("dec.")}


def _apply(layer: _Layer, x: Tensor, params, prefix: str, config: AEConfig) -> Tensor:
    w = params[_pname(prefix, layer, "w")]
    b = params[_pname(prefix, layer, "b")]
    pad = config.kernel // 2
    if layer.upsample:
        x = upsample2x(x)
    y = conv2d(x, w, b, stride=layer.stride, pad=pad)
    return tanh(y) if layer.head else leaky_relu(y, 0.1)


def _as_batch(x, config: AEConfig, channels: int, hw: Tuple[int, int], what: str) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=config.dtype))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != channels or tuple(x.shape[2:]) != tuple(hw):
        raise DimensionError(
            f"{what}: expected (n, {channels}, {hw[0]}, {hw[1]}), got {tuple(x.shape)}"
        )
    return x


def forward_to_plug(x, params, config: AEConfig) -> Tensor:
    """Encoder E: stacked input frames (n, T_in*c0, h0, w0) -> encoding map (n, c, h, w)."""
    x = _as_batch(x, config, config.in_channels, config.frame_size, "forward_to_plug")
    enc, _ = _split(config)
    for layer in enc:
        x = _apply(layer, x, params, "enc", config)
    return x


def forward_from_plug(z, params, config: AEConfig) -> Tensor:
    """Decoder D: encoding map (n, c, h, w) -> predicted frame (n, c0, h0, w0) in [-1, 1]."""
    c, h, w = plug_shape(config)
    z = _as_batch(z, config, c, (h, w), "forward_from_plug")
    _, dec = _split(config)
    for layer in dec:
        z = _apply(layer, z, params, "dec", config)
    return z


def frame_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared pixel error."""
    if tuple(pred.shape) != tuple(target.shape):
        raise DimensionError(f"frame_loss: prediction {pred.shape} vs target {target.shape}")
    d = pred - target
    return (d * d).mean()


class GradientDescent:
    """Plain gradient descent with optional heavy-ball momentum."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict = {}

    def step(self, grads: dict) -> None:
        for name, g in grads.items():
            if g is None:
                continue
            p = self.params[name]
            step = g.data
            if self.momentum:
                v = self._velocity.get(name)
                v = step if v is None else self.momentum * v + step
                self._velocity[name] = v
                step = v
            new = (p.data - self.lr * step).astype(p.dtype)
            self.params[name] = Parameter(new, name)


def sample_batches(n_items: int, batch_size: int, steps: int, seed: int):
    """Deterministic stream of index batches drawn without replacement per epoch."""
    rng = np.random.default_rng(seed)
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(n_items)])
        batch, order = order[:batch_size], order[batch_size:]
        yield batch


def fit_loop(params: dict, trainable: Sequence[str], loss_fn: Callable, n_items: int, steps: int,
             lr: float, batch_size: int = 4, momentum: float = 0.0, seed: int = 0,
             log_every: int = 1) -> Tuple[dict, List[dict]]:
    """Generic minibatch loop: ``loss_fn(params, idx) -> (loss, parts_dict)``."""
    if n_items < 1:
        raise DataError("empty dataset: no training pairs")
    params = dict(params)
    opt = GradientDescent(params, lr, momentum)
    history = []
    for step, idx in enumerate(sample_batches(n_items, min(batch_size, n_items), steps, seed)):
        loss, parts = loss_fn(params, idx)
        names = [n for n in trainable]
        gs = grad(loss, [params[n] for n in names])
        if lr != 0.0:
            opt.step(dict(zip(names, gs)))
        if step % log_every == 0:
            history.append({"step": step, "loss": float(loss.item()), **{k: float(v) for k, v in parts.items()}})
    return opt.params, history


def pretrain(x: np.ndarray, y: np.ndarray, config: AEConfig, steps: int, lr: float,
             params: Optional[Params] = None, seed: int = 0, batch_size: int = 4,
             momentum: float = 0.0) -> Tuple[Params, List[dict]]:
    """Train encoder and decoder on the frame prediction loss alone.

    ``x`` is (n, T_in*c0, h0, w0) stacked inputs, ``y`` is (n, c0, h0, w0) targets.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) == 0 or len(x) != len(y):
        raise DataError(f"empty or misaligned dataset: {len(x)} inputs, {len(y)} targets")
    if params is None:
        params = build(config, seed)
    dtype = np.dtype(config.dtype)

    def loss_fn(p, idx):
        xb = Tensor(x[idx].astype(dtype, copy=False))
        yb = Tensor(y[idx].astype(dtype, copy=False))
        pred = forward_from_plug(forward_to_plug(xb, p, config), p, config)
        loss = frame_loss(pred, yb)
        return loss, {"l_fra": loss.item()}

    return fit_loop(params, list(params), loss_fn, len(x), steps, lr, batch_size, momentum, seed)


def predict(x, params, config: AEConfig) -> Tensor:
    with no_grad():
        return forward_from_plug(forward_to_plug(x, params, config), params, config)


def param_count(params: dict) -> int:
    return int(sum(p.size for p in params.values()))
