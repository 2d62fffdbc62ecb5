"""Dynamic Prototype Unit: normalcy attention, prototype ensemble and retrieval.

Encoding vectors are handled as ``(B, N, c)`` tensors (``N = h * w``
locations); unbatched ``(N, c)`` inputs are accepted and promoted.  The
attention functions are bias-free linear maps stored as one ``(M, c)``
matrix, so the unit adds exactly ``M * c`` parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .ndtensor import (
    Parameter,
    Tensor,
    as_tensor,
    div,
    gather_rows,
    index,
    matmul,
    norm,
    relu,
    reshape,
    sigmoid,
    softmax,
    swapaxes,
    transpose,
    tsum,
)

BETA_MODES = ("softmax", "raw")


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.01
    gamma: float = 1.0
    lambda_s: float = 1.0

    def __post_init__(self):
        for k in ("lambda1", "lambda2", "gamma", "lambda_s"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0, got {getattr(self, k)}")


class DPUOutput(NamedTuple):
    encoding: Tensor      # aggregated output, same shape as the input map
    prototypes: Tensor    # (B, M, c)
    beta: Tensor          # (B, N, M)
    weights: Tensor       # (B, N, M) normalcy weights before normalization


def init_attention(n_prototypes: int, channels: int, seed: int = 0, dtype="float32",
                   scale: Optional[float] = None) -> Parameter:
    if n_prototypes < 1:
        raise ConfigError("n_prototypes must be >= 1")
    rng = np.random.default_rng(seed)
    bound = scale if scale is not None else 1.0 / np.sqrt(channels)
    psi = rng.uniform(-bound, bound, size=(n_prototypes, channels)).astype(dtype)
    return Parameter(psi, "dpu.psi")


def _vectors(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 2:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"encoding vectors must be (N, c) or (B, N, c), got {x.shape}")
    return x


def map_to_vectors(z: Tensor) -> Tensor:
    """(B, c, h, w) -> (B, h*w, c)."""
    b, c, h, w = z.shape
    return transpose(reshape(z, (b, c, h * w)), (0, 2, 1))


def vectors_to_map(v: Tensor, hw) -> Tensor:
    b, n, c = v.shape
    return reshape(transpose(v, (0, 2, 1)), (b, c) + tuple(hw))


def attention(x, psi) -> Tensor:
    """Normalcy weights w[b, n, m] = sigmoid(<x_n, psi_m>)."""
    x = _vectors(x)
    psi = as_tensor(psi)
    if psi.ndim != 2 or psi.shape[1] != x.shape[-1]:
        raise DimensionError(f"attention: psi {psi.shape} does not match encoding dimension {x.shape[-1]}")
    return sigmoid(matmul(x, swapaxes(psi, 0, 1)))


def ensemble(x, w) -> Tensor:
    """Prototypes p_m = sum_n (w_nm / sum_n' w_n'm) x_n, returned as (B, M, c)."""
    x = _vectors(x)
    w = _vectors(w)
    if w.shape[:2] != x.shape[:2]:
        raise DimensionError(f"ensemble: weights {w.shape} vs encodings {x.shape}")
    totals = tsum(w, 1, keepdims=True)
    if np.any(totals.data <= 0) or np.any(w.data < 0):
        raise NumericError("ensemble: degenerate normalcy weights (non-positive map total)")
    normalized = div(w, totals)
    return matmul(swapaxes(normalized, 1, 2), x)


def retrieve(x, prototypes, mode: str = "softmax"):
    """Reconstruct every vector from the prototype pool; returns (x_tilde, beta)."""
    if mode not in BETA_MODES:
        raise ConfigError(f"beta mode must be one of {BETA_MODES}, got {mode!r}")
    x = _vectors(x)
    p = _vectors(prototypes)
    if p.shape[-1] != x.shape[-1] or p.shape[0] != x.shape[0]:
        raise DimensionError(f"retrieve: prototypes {p.shape} vs encodings {x.shape}")
    scores = matmul(x, swapaxes(p, 1, 2))
    if mode == "softmax":
        beta = softmax(scores, axis=-1)
    else:
        denom = tsum(scores, -1, keepdims=True)
        bad = np.abs(denom.data[..., 0]) < 1e-8
        if np.any(bad):
            b, n = np.argwhere(bad)[0]
            raise NumericError(f"retrieve(raw): degenerate denominator at batch {b}, location {n}")
        beta = div(scores, denom)
    return matmul(beta, p), beta


def aggregate(x, x_tilde) -> Tensor:
    x, x_tilde = as_tensor(x), as_tensor(x_tilde)
    if x.shape != x_tilde.shape:
        raise DimensionError(f"aggregate: shapes {x.shape} and {x_tilde.shape} differ")
    return x + x_tilde


def dpu_forward(z, psi, mode: str = "softmax") -> DPUOutput:
    """Attention -> ensemble -> retrieve -> aggregate on a (B, c, h, w) encoding map."""
    z = as_tensor(z)
    if z.ndim == 3:
        z = reshape(z, (1,) + z.shape)
    if z.ndim != 4:
        raise DimensionError(f"dpu_forward expects (B, c, h, w), got {z.shape}")
    x = map_to_vectors(z)
    w = attention(x, psi)
    p = ensemble(x, w)
    x_tilde, beta = retrieve(x, p, mode)
    out = vectors_to_map(aggregate(x, x_tilde), z.shape[2:])
    return DPUOutput(out, p, beta, w)


def most_relevant(beta) -> np.ndarray:
    """argmax over prototypes, ties toward the smallest index; a constant index array."""
    beta = _vectors(beta)
    return np.argmax(beta.data, axis=-1)


def compact_distances(x, prototypes, beta) -> Tensor:
    """Per-location distance to the most relevant prototype, (B, N)."""
    x, p = _vectors(x), _vectors(prototypes)
    idx = most_relevant(beta)
    return norm(x - gather_rows(p, idx), axis=-1)


def loss_compact(x, prototypes, beta, per_item: bool = False) -> Tensor:
    """Mean distance of each vector to its most relevant prototype (index not differentiated)."""
    d = compact_distances(x, prototypes, beta)
    per = d.mean(axis=1)
    return per if per_item else per.mean()


def loss_diverse(prototypes, gamma: float = 1.0, per_item: bool = False) -> Tensor:
    """Mean over unordered prototype pairs of the hinge [gamma - ||p_m - p_m'||]_+."""
    p = _vectors(prototypes)
    b, m, _ = p.shape
    if m < 2:
        zero = Tensor(np.zeros(b if per_item else (), dtype=p.dtype))
        return zero
    i, j = np.triu_indices(m, 1)
    diff = index(p, (slice(None), i)) - index(p, (slice(None), j))
    hinge = relu(gamma - norm(diff, axis=-1))
    per = hinge.mean(axis=1)
    return per if per_item else per.mean()


class LossTerms(NamedTuple):
    total: Tensor
    frame: Tensor
    compact: Tensor
    diverse: Tensor


def loss_total(pred, target, x, prototypes, beta, weights: Optional[LossWeights] = None) -> LossTerms:
    """L = L_fra + lambda1 * (L_c + lambda2 * L_d), with L_fra the mean squared pixel error."""
    weights = weights or LossWeights()
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss_total: prediction {pred.shape} vs target {target.shape}")
    d = pred - target
    l_fra = (d * d).mean()
    l_c = loss_compact(x, prototypes, beta)
    l_d = loss_diverse(prototypes, weights.gamma)
    total = l_fra + weights.lambda1 * (l_c + weights.lambda2 * l_d)
    return LossTerms(total, l_fra, l_c, l_d)


def attention_param_count(n_prototypes: int, channels: int) -> int:
    return init_attention(n_prototypes, channels).size


# -- normalcy-map dump -------------------------------------------------------

def _write_pgm(path: Path, img: np.ndarray) -> None:
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    px = np.round(scaled * 255).astype(np.uint8)
    h, w = px.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def dump_maps(weights, hw, out_dir, frame: int) -> list:
    """Write ``<frame>_map<m>.pgm`` per attention map plus ``<frame>_mapsum.pgm``."""
    w = _vectors(weights).data[0]
    h, wd = hw
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for m in range(w.shape[1]):
        path = out_dir / f"{frame}_map{m}.pgm"
        _write_pgm(path, w[:, m].reshape(h, wd))
        written.append(path)
    path = out_dir / f"{frame}_mapsum.pgm"
    _write_pgm(path, w.sum(axis=1).reshape(h, wd))
    written.append(path)
    return written


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header, rest = raw.split(b"\n", 3)[:3], raw.split(b"\n", 3)[3]
    w, h = (int(v) for v in header[1].split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
