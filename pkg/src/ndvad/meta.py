"""Few-shot scene adaptation: K-shot episodes, the inner update with learned
per-parameter step sizes, and the outer optimization of (theta0, alpha).

The encoder stays frozen throughout; only the attention parameters and the
decoder (the target model) are adapted and meta-learned.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import model as mdl
from .dpu import LossWeights
from .errors import ConfigError, DataError, NumericError
from .ndtensor import Parameter, Tensor, grad, no_grad
from .scenesynth import VideoClip, build_pairs

MODES = ("exact", "first_order")


@dataclass
class MetaConfig:
    k_shot: int = 5
    inner_steps: int = 1
    mode: str = "exact"
    outer_lr_theta: float = 1e-5
    outer_lr_alpha: float = 1e-5
    episodes_per_batch: int = 10
    alpha_init: float = 1e-4
    alpha_max: float = 1.0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.outer_lr_theta <= 0 or self.outer_lr_alpha <= 0:
            raise ConfigError("outer learning rates must be > 0")
        if self.k_shot < 1:
            raise ConfigError("k_shot must be >= 1 for meta-training")
        if self.episodes_per_batch < 1:
            raise ConfigError("episodes_per_batch must be >= 1")
        if self.alpha_max <= 0:
            raise ConfigError("alpha_max must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetaState:
    theta: Dict[str, Parameter]
    alpha: Dict[str, Parameter]
    eta: Dict[str, Tensor]
    spec: mdl.ModelSpec
    clamp_events: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if set(self.theta) != set(self.alpha):
            raise ConfigError("theta and alpha must share parameter names")
        for k in self.theta:
            if self.theta[k].shape != self.alpha[k].shape:
                raise ConfigError(f"alpha[{k!r}] shape {self.alpha[k].shape} != theta shape {self.theta[k].shape}")

    def params(self, theta: Optional[dict] = None) -> dict:
        out = dict(self.eta)
        out.update(self.theta if theta is None else theta)
        return out


@dataclass
class Episode:
    scene_id: str
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_index: np.ndarray   # window start frames
    query_index: np.ndarray


def init_state(params: dict, spec: mdl.ModelSpec, config: MetaConfig) -> MetaState:
    names = mdl.target_names(params)
    theta = {k: Parameter(params[k].data, k) for k in names}
    alpha = {k: Parameter(np.full(params[k].shape, config.alpha_init, dtype=params[k].dtype), k) for k in names}
    eta = {k: Tensor(v.data) for k, v in params.items() if k not in theta}
    return MetaState(theta, alpha, eta, spec)


# ---------------------------------------------------------------------------
# inner update
# ---------------------------------------------------------------------------

def inner_update(theta: dict, alpha: dict, loss_fn: Callable[[dict], Tensor], steps: int = 1,
                 create_graph: bool = True) -> dict:
    """theta <- theta - alpha * grad(loss_fn(theta)), repeated ``steps`` times.

    With ``create_graph`` the result stays differentiable w.r.t. theta and
    alpha through the gradient itself; otherwise the gradient is a constant.
    """
    current = dict(theta)
    for _ in range(steps):
        names = list(current)
        loss = loss_fn(current)
        try:
            gs = grad(loss, [current[n] for n in names], create_graph=create_graph)
        except NumericError as exc:
            raise NumericError(f"non-finite inner gradient for parameter {_culprit(current, loss_fn)!r}: {exc}") from exc
        updated = {}
        for n, g in zip(names, gs):
            if g is None:
                updated[n] = current[n]
                continue
            if not np.all(np.isfinite(g.data)):
                raise NumericError(f"non-finite inner gradient for parameter {n!r}")
            updated[n] = current[n] - alpha[n] * g
        current = updated
    return current


def _culprit(theta: dict, loss_fn) -> str:
    """First parameter whose gradient alone cannot be computed finitely (error path only)."""
    for n in theta:
        probe = {k: (v if k == n else v.detach()) for k, v in theta.items()}
        try:
            g = grad(loss_fn(probe), [probe[n]])[0]
        except NumericError:
            return n
        if g is not None and not np.all(np.isfinite(g.data)):
            return n
    return "?"


def _pair_loss(state: MetaState, weights: LossWeights, x: np.ndarray, y: np.ndarray):
    spec = state.spec
    dtype = np.dtype(spec.ae.dtype)
    from . import backbone

    with no_grad():
        z = backbone.forward_to_plug(Tensor(x.astype(dtype, copy=False)), state.eta, spec.ae)
    z = z.detach()
    yt = Tensor(y.astype(dtype, copy=False))

    def loss_fn(theta: dict) -> Tensor:
        fwd = mdl.forward_from_encoding(theta, z, spec)
        return mdl.losses(fwd, yt, spec, weights).total

    return loss_fn


def adapt_theta(state: MetaState, x: np.ndarray, y: np.ndarray, config: MetaConfig,
                weights: Optional[LossWeights] = None, create_graph: bool = False) -> dict:
    weights = weights or LossWeights()
    if len(x) == 0:
        raise DataError("support set is empty")
    loss_fn = _pair_loss(state, weights, x, y)
    return inner_update(state.theta, state.alpha, loss_fn, config.inner_steps, create_graph)


def episode_loss(state: MetaState, episode: Episode, config: MetaConfig,
                 weights: Optional[LossWeights] = None) -> Tensor:
    """Query loss under the parameters adapted on the support pairs."""
    weights = weights or LossWeights()
    theta_hat = adapt_theta(state, episode.support_x, episode.support_y, config, weights,
                            create_graph=config.mode == "exact")
    return _pair_loss(state, weights, episode.query_x, episode.query_y)(theta_hat)


def meta_gradients(state: MetaState, episodes: Sequence[Episode], config: MetaConfig,
                   weights: Optional[LossWeights] = None):
    """Mean query loss over episodes and its gradients w.r.t. theta0 and alpha."""
    if not episodes:
        raise DataError("empty episode batch")
    names = list(state.theta)
    g_theta = {n: np.zeros(state.theta[n].shape, dtype=np.float64) for n in names}
    g_alpha = {n: np.zeros(state.alpha[n].shape, dtype=np.float64) for n in names}
    total = 0.0
    for ep in episodes:
        loss = episode_loss(state, ep, config, weights)
        gs = grad(loss, [state.theta[n] for n in names] + [state.alpha[n] for n in names])
        for n, g in zip(names, gs[: len(names)]):
            if g is not None:
                g_theta[n] += g.data
        for n, g in zip(names, gs[len(names):]):
            if g is not None:
                g_alpha[n] += g.data
        total += loss.item()
    k = float(len(episodes))
    for n in names:
        g_theta[n] /= k
        g_alpha[n] /= k
        if not (np.all(np.isfinite(g_theta[n])) and np.all(np.isfinite(g_alpha[n]))):
            raise NumericError(f"non-finite outer gradient for parameter {n!r}")
    return total / k, g_theta, g_alpha


def meta_step(state: MetaState, episodes: Sequence[Episode], config: MetaConfig,
              weights: Optional[LossWeights] = None, step: int = 0) -> float:
    """One outer gradient step on (theta0, alpha); alpha is clamped to [-alpha_max, alpha_max]."""
    loss, g_theta, g_alpha = meta_gradients(state, episodes, config, weights)
    for n in list(state.theta):
        th = state.theta[n]
        al = state.alpha[n]
        new_th = (th.data - config.outer_lr_theta * g_theta[n]).astype(th.dtype)
        new_al = (al.data - config.outer_lr_alpha * g_alpha[n]).astype(al.dtype)
        clipped = np.clip(new_al, -config.alpha_max, config.alpha_max)
        hits = int(np.count_nonzero(clipped != new_al))
        if hits:
            state.clamp_events.append({"step": step, "param": n, "count": hits})
        state.theta[n] = Parameter(new_th, n)
        state.alpha[n] = Parameter(clipped, n)
    return loss


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def _disjoint_starts(n_frames: int, window: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` non-overlapping windows placed uniformly at random (stars and bars)."""
    slack = n_frames - count * window
    if slack < 0:
        raise DataError(f"clip of {n_frames} frames too short: need at least {count * window}")
    cuts = np.sort(rng.integers(0, slack + 1, size=count))
    return cuts + np.arange(count) * window


def sample_episode(clip, k: int, seed: int, input_frames: int, scene_id: str = "") -> Episode:
    """K support and K query pairs from 2K disjoint windows of one clip."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    if k < 1:
        raise DataError("episodes need K >= 1")
    window = input_frames + 1
    need = 2 * k * window
    if len(frames) < need:
        raise DataError(f"clip has {len(frames)} frames; a {k}-shot episode needs at least {need}")
    rng = np.random.default_rng(seed)
    starts = _disjoint_starts(len(frames), window, 2 * k, rng)
    perm = rng.permutation(2 * k)
    sup, qry = np.sort(starts[perm[:k]]), np.sort(starts[perm[k:]])
    sx, sy = _windows(frames, sup, input_frames)
    qx, qy = _windows(frames, qry, input_frames)
    sid = scene_id or (clip.scene.scene_id if isinstance(clip, VideoClip) and clip.scene else "")
    return Episode(sid, sx, sy, qx, qy, sup, qry)


def _windows(frames: np.ndarray, starts: np.ndarray, input_frames: int):
    f, c, h, w = frames.shape
    x = np.stack([frames[s : s + input_frames].reshape(input_frames * c, h, w) for s in starts])
    y = np.stack([frames[s + input_frames] for s in starts])
    return x, y


def leading_pairs(clip, k: int, input_frames: int):
    """K disjoint consecutive windows from the first K*(T_in+1) frames."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    need = k * (input_frames + 1)
    if len(frames) < need:
        raise DataError(f"adaptation clip has {len(frames)} frames; K={k} needs at least {need}")
    starts = np.arange(k) * (input_frames + 1)
    return _windows(frames, starts, input_frames)


def adapt(state: MetaState, adaptation_clip, k: int, config: MetaConfig,
          weights: Optional[LossWeights] = None) -> dict:
    """Full parameter dict after K-shot adaptation on the clip's leading frames; K=0 is a no-op."""
    if k == 0:
        return state.params()
    x, y = leading_pairs(adaptation_clip, k, state.spec.ae.input_frames)
    theta_hat = adapt_theta(state, x, y, config, weights)
    return state.params({n: Parameter(t.data, n) for n, t in theta_hat.items()})


def meta_train(state: MetaState, clips: Sequence[VideoClip], config: MetaConfig, steps: int,
               weights: Optional[LossWeights] = None, seed: int = 0, log_every: int = 1) -> List[dict]:
    """Run ``steps`` meta-steps; each batch draws episodes from distinct scenes in turn."""
    if not clips:
        raise DataError("meta-training needs at least one clip")
    rng = np.random.default_rng([seed, 11])
    history = []
    t_in = state.spec.ae.input_frames
    order = np.empty(0, dtype=np.int64)
    for step in range(steps):
        episodes = []
        for e in range(config.episodes_per_batch):
            if order.size == 0:
                order = rng.permutation(len(clips))
            ci, order = int(order[0]), order[1:]
            ep_seed = int(rng.integers(1 << 31))
            episodes.append(sample_episode(clips[ci], config.k_shot, ep_seed, t_in))
        loss = meta_step(state, episodes, config, weights, step)
        if step % log_every == 0:
            history.append({"step": step, "loss": loss,
                            "alpha_mean": float(np.mean([np.abs(a.data).mean() for a in state.alpha.values()]))})
    return history
