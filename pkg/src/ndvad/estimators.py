"""Estimator front end with the familiar fit / score_samples / score API.

Inputs are video clips: a :class:`~ndvad.scenesynth.VideoClip`, or a bare
``(F, c, h, w)`` array (labels then default to all-normal).
"""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import backbone, meta
from . import model as mdl
from . import scoring
from .backbone import AEConfig
from .dpu import LossWeights
from .errors import DataError, DimensionError
from .scenesynth import VideoClip, build_pairs


def check_clip(clip, frame_size=None, channels=None) -> VideoClip:
    """Coerce to a VideoClip with finite frames in [-1, 1] and binary labels."""
    if not isinstance(clip, VideoClip):
        frames = np.asarray(clip)
        if frames.ndim == 3:
            frames = frames[:, None]
        clip = VideoClip(frames, np.zeros(len(frames), dtype=np.uint8))
    frames = np.asarray(clip.frames)
    if frames.ndim != 4:
        raise DimensionError(f"clip frames must be (F, c, h, w), got shape {frames.shape}")
    if not np.issubdtype(frames.dtype, np.floating):
        raise DataError(f"clip frames must be floating point, got {frames.dtype}")
    if not np.all(np.isfinite(frames)) or np.abs(frames).max(initial=0.0) > 1.0:
        raise DataError("clip frames must be finite and lie in [-1, 1]")
    if len(clip.labels) != len(frames) or not np.all(np.isin(clip.labels, (0, 1))):
        raise DataError("clip labels must be binary with one entry per frame")
    if frame_size is not None and tuple(frames.shape[2:]) != tuple(frame_size):
        raise DimensionError(f"clip frames are {frames.shape[2:]}, model expects {tuple(frame_size)}")
    if channels is not None and frames.shape[1] != channels:
        raise DimensionError(f"clip has {frames.shape[1]} channels, model expects {channels}")
    return clip


def check_clips(clips) -> List[VideoClip]:
    if isinstance(clips, (VideoClip, np.ndarray)):
        clips = [clips]
    clips = [check_clip(c) for c in clips]
    if not clips:
        raise DataError("no clips given")
    shapes = {c.frames.shape[1:] for c in clips}
    if len(shapes) != 1:
        raise DimensionError(f"clips disagree on frame shape: {sorted(shapes)}")
    return clips


def _pairs(clips: Sequence[VideoClip], t_in: int):
    xs, ys = zip(*[build_pairs(c, t_in)[:2] for c in clips])
    return np.concatenate(xs), np.concatenate(ys)


class FramePredictor(BaseEstimator):
    """Future-frame predictor, optionally with the prototype unit plugged in.

    ``fit`` pretrains the backbone on frame prediction, then (with
    ``use_dpu``) trains the attention weights and decoder on the full
    objective.  ``score_samples`` returns per-frame anomaly scores.
    """

    def __init__(self, input_frames=4, stage_channels=(16, 32, 64), plug_stage=3, kernel=3,
                 use_dpu=True, n_prototypes=10, beta_mode="softmax", lambda1=1.0, lambda2=0.01,
                 gamma=1.0, lambda_s=1.0, pretrain_steps=2000, train_steps=2000, lr=0.05,
                 momentum=0.9, batch_size=8, normalize=True, dtype="float32", random_state=0):
        self.input_frames = input_frames
        self.stage_channels = stage_channels
        self.plug_stage = plug_stage
        self.kernel = kernel
        self.use_dpu = use_dpu
        self.n_prototypes = n_prototypes
        self.beta_mode = beta_mode
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.gamma = gamma
        self.lambda_s = lambda_s
        self.pretrain_steps = pretrain_steps
        self.train_steps = train_steps
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.normalize = normalize
        self.dtype = dtype
        self.random_state = random_state

    def _spec(self, frame_size, channels) -> mdl.ModelSpec:
        ae = AEConfig(self.input_frames, tuple(frame_size), channels, tuple(self.stage_channels),
                      self.plug_stage, self.kernel, self.dtype)
        return mdl.ModelSpec(ae, self.n_prototypes, self.beta_mode, self._use_dpu())

    def _use_dpu(self) -> bool:
        return bool(self.use_dpu)

    def _weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.gamma, self.lambda_s)

    def fit(self, clips, y=None):
        clips = check_clips(clips)
        _, c, h, w = clips[0].frames.shape
        spec = self._spec((h, w), c)
        x, yy = _pairs(clips, spec.ae.input_frames)
        seed = int(self.random_state)
        params, log = backbone.pretrain(x, yy, spec.ae, self.pretrain_steps, self.lr, seed=seed,
                                        batch_size=self.batch_size, momentum=self.momentum)
        history = [{"stage": "pretrain", **r} for r in log]
        if spec.use_dpu:
            params = mdl.add_dpu(params, spec, seed)
            params, log = mdl.train(x, yy, spec, params, self.train_steps, self.lr, self._weights(),
                                    seed=seed + 1, batch_size=self.batch_size, momentum=self.momentum)
            history += [{"stage": "dpu", **r} for r in log]
        self.spec_ = spec
        self.params_ = params
        self.history_ = history
        return self

    def _check(self, clip) -> VideoClip:
        check_is_fitted(self, "params_")
        return check_clip(clip, self.spec_.ae.frame_size, self.spec_.ae.frame_channels)

    def predict(self, clip) -> np.ndarray:
        """Predicted frames for every index >= input_frames."""
        clip = self._check(clip)
        x, _, _ = build_pairs(clip, self.spec_.ae.input_frames)
        return backbone.predict(x.astype(self.dtype), self.params_, self.spec_.ae).data

    def score_series(self, clip) -> scoring.ScoreSeries:
        clip = self._check(clip)
        return scoring.score_frames(self.params_, self.spec_, clip, self.lambda_s, self.normalize)

    def score_samples(self, clip) -> np.ndarray:
        """Combined anomaly score S per predicted frame (higher = more anomalous)."""
        return self.score_series(clip).s

    def score(self, clips, y=None) -> float:
        """Frame-level AUC over labelled clips."""
        series = [self.score_series(c) for c in check_clips(clips)]
        return scoring.aggregate_auc(series, "s")


class MetaPrototypeDetector(FramePredictor):
    """Meta-learned prototype unit for few-shot scene adaptation.

    ``fit`` takes normal clips from many scenes, runs pretraining and
    prototype training, then meta-learns the initialization and the
    per-parameter step sizes.  ``adapt`` specializes to a new scene from
    its leading frames.
    """

    def __init__(self, input_frames=4, stage_channels=(16, 32, 64), plug_stage=3, kernel=3,
                 n_prototypes=10, beta_mode="softmax", lambda1=1.0, lambda2=0.01, gamma=1.0,
                 lambda_s=1.0, pretrain_steps=2000, train_steps=2000, lr=0.05, momentum=0.9,
                 batch_size=8, meta_steps=1000, k_shot=5, inner_steps=1, mode="exact",
                 outer_lr_theta=1e-5, outer_lr_alpha=1e-5, episodes_per_batch=10, alpha_init=1e-4,
                 alpha_max=1.0, n_shots=0, normalize=True, dtype="float32", random_state=0):
        self.input_frames = input_frames
        self.stage_channels = stage_channels
        self.plug_stage = plug_stage
        self.kernel = kernel
        self.n_prototypes = n_prototypes
        self.beta_mode = beta_mode
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.gamma = gamma
        self.lambda_s = lambda_s
        self.pretrain_steps = pretrain_steps
        self.train_steps = train_steps
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.meta_steps = meta_steps
        self.k_shot = k_shot
        self.inner_steps = inner_steps
        self.mode = mode
        self.outer_lr_theta = outer_lr_theta
        self.outer_lr_alpha = outer_lr_alpha
        self.episodes_per_batch = episodes_per_batch
        self.alpha_init = alpha_init
        self.alpha_max = alpha_max
        self.n_shots = n_shots
        self.normalize = normalize
        self.dtype = dtype
        self.random_state = random_state

    def _use_dpu(self) -> bool:
        return True

    def _meta_config(self) -> meta.MetaConfig:
        return meta.MetaConfig(self.k_shot, self.inner_steps, self.mode, self.outer_lr_theta,
                               self.outer_lr_alpha, self.episodes_per_batch, self.alpha_init,
                               self.alpha_max)

    def fit(self, clips, y=None):
        clips = check_clips(clips)
        super().fit(clips)
        config = self._meta_config()
        self.state_ = meta.init_state(self.params_, self.spec_, config)
        log = meta.meta_train(self.state_, clips, config, self.meta_steps, self._weights(),
                              seed=int(self.random_state) + 2)
        self.history_ += [{"stage": "meta", **r} for r in log]
        self.params_ = self.state_.params()
        return self

    def adapt(self, clip, k: Optional[int] = None) -> dict:
        """Parameters after ``k``-shot adaptation on ``clip``'s leading frames."""
        check_is_fitted(self, "state_")
        clip = self._check(clip)
        k = self.n_shots if k is None else k
        return meta.adapt(self.state_, clip, k, self._meta_config(), self._weights())

    def score_series(self, clip, k: Optional[int] = None) -> scoring.ScoreSeries:
        params = self.adapt(clip, k)
        return scoring.score_frames(params, self.spec_, self._check(clip), self.lambda_s, self.normalize)

    def score(self, clips, y=None, k: Optional[int] = None) -> float:
        k = self.n_shots if k is None else k
        start = k * (self.input_frames + 1)
        series = [self.score_series(c, k).window(start) for c in check_clips(clips)]
        return scoring.aggregate_auc(series, "s")
