"""Backbone + DPU predictor: functional forward passes and the DPU training stage."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from . import backbone
from .backbone import AEConfig
from .dpu import LossTerms, LossWeights, dpu_forward, init_attention, loss_total, map_to_vectors
from .errors import ConfigError, DataError
from .ndtensor import Tensor, no_grad


@dataclass
class ModelSpec:
    ae: AEConfig = field(default_factory=AEConfig)
    n_prototypes: int = 10
    beta_mode: str = "softmax"
    use_dpu: bool = True
    detach_features: bool = True

    def __post_init__(self):
        if isinstance(self.ae, dict):
            self.ae = AEConfig(**self.ae)
        if self.n_prototypes < 1:
            raise ConfigError("n_prototypes must be >= 1")
        if self.beta_mode not in ("softmax", "raw"):
            raise ConfigError(f"beta_mode must be softmax or raw, got {self.beta_mode!r}")

    def to_dict(self) -> dict:
        return {"ae": self.ae.to_dict(), "n_prototypes": self.n_prototypes,
                "beta_mode": self.beta_mode, "use_dpu": self.use_dpu,
                "detach_features": self.detach_features}


class Forward(NamedTuple):
    pred: Tensor
    vectors: Optional[Tensor]     # (B, N, c) encoding vectors at the plug spot
    prototypes: Optional[Tensor]
    beta: Optional[Tensor]
    weights: Optional[Tensor]


def init_params(spec: ModelSpec, seed: int = 0) -> dict:
    params = backbone.build(spec.ae, seed)
    if spec.use_dpu:
        params["dpu.psi"] = _psi(spec, seed)
    return params


def _psi(spec: ModelSpec, seed: int):
    c = backbone.plug_shape(spec.ae)[0]
    return init_attention(spec.n_prototypes, c, seed=seed + 7919, dtype=spec.ae.dtype)


def add_dpu(params: dict, spec: ModelSpec, seed: int = 0) -> dict:
    """Attach freshly initialized attention parameters to a pretrained backbone."""
    out = dict(params)
    if spec.use_dpu and "dpu.psi" not in out:
        out["dpu.psi"] = _psi(spec, seed)
    return out


def target_names(params: dict) -> List[str]:
    """The few-shot target parameters: attention and decoder (everything but enc.*)."""
    return [k for k in params if not k.startswith("enc.")]


def forward_from_encoding(theta: dict, z: Tensor, spec: ModelSpec) -> Forward:
    if spec.use_dpu:
        psi = theta["dpu.psi"]
        out = dpu_forward(z, psi, spec.beta_mode)
        pred = backbone.forward_from_plug(out.encoding, theta, spec.ae)
        if spec.detach_features and z.requires_grad:
            # feature terms reach only the attention weights, not the encoder
            zd = z.detach()
            side = dpu_forward(zd, psi, spec.beta_mode)
            return Forward(pred, map_to_vectors(zd), side.prototypes, side.beta, side.weights)
        return Forward(pred, map_to_vectors(z), out.prototypes, out.beta, out.weights)
    return Forward(backbone.forward_from_plug(z, theta, spec.ae), None, None, None, None)


def forward(params: dict, x, spec: ModelSpec) -> Forward:
    z = backbone.forward_to_plug(x, params, spec.ae)
    return forward_from_encoding(params, z, spec)


def losses(fwd: Forward, y, spec: ModelSpec, weights: LossWeights) -> LossTerms:
    if spec.use_dpu:
        return loss_total(fwd.pred, y, fwd.vectors, fwd.prototypes, fwd.beta, weights)
    l_fra = backbone.frame_loss(fwd.pred, y)
    zero = Tensor(np.zeros((), dtype=l_fra.dtype))
    return LossTerms(l_fra, l_fra, zero, zero)


def encode(params: dict, x: np.ndarray, spec: ModelSpec, batch: int = 32) -> np.ndarray:
    """Frozen-encoder feature maps for many inputs, computed without a graph."""
    outs = []
    with no_grad():
        for i in range(0, len(x), batch):
            xb = Tensor(np.asarray(x[i : i + batch], dtype=spec.ae.dtype))
            outs.append(backbone.forward_to_plug(xb, params, spec.ae).data)
    return np.concatenate(outs) if outs else np.empty((0,) + backbone.plug_shape(spec.ae), spec.ae.dtype)


def train(x: np.ndarray, y: np.ndarray, spec: ModelSpec, params: dict, steps: int, lr: float,
          weights: Optional[LossWeights] = None, seed: int = 0, batch_size: int = 4,
          momentum: float = 0.0) -> Tuple[dict, List[dict]]:
    """Train every parameter on the full objective (frame prediction + feature terms)."""
    weights = weights or LossWeights()
    if len(x) == 0:
        raise DataError("empty dataset: no training pairs")
    dtype = np.dtype(spec.ae.dtype)

    def loss_fn(p, idx):
        fwd = forward(p, Tensor(x[idx].astype(dtype, copy=False)), spec)
        terms = losses(fwd, Tensor(y[idx].astype(dtype, copy=False)), spec, weights)
        return terms.total, {"l_fra": terms.frame.item(), "l_c": terms.compact.item(), "l_d": terms.diverse.item()}

    return backbone.fit_loop(params, list(params), loss_fn, len(x), steps, lr, batch_size, momentum, seed)
