"""Per-frame anomaly scores and frame-level ROC-AUC."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import model as mdl
from .dpu import loss_compact
from .errors import DataError, EvaluationError
from .ndtensor import Tensor, no_grad
from .scenesynth import VideoClip, build_pairs


@dataclass
class ScoreSeries:
    frame_index: np.ndarray
    s_fra: np.ndarray
    s_fea: np.ndarray
    labels: np.ndarray
    lambda_s: float = 1.0

    def __post_init__(self):
        n = len(self.frame_index)
        for name in ("s_fra", "s_fea", "labels"):
            if len(getattr(self, name)) != n:
                raise DataError(f"ScoreSeries.{name} has {len(getattr(self, name))} entries, expected {n}")
        if not (np.all(np.isfinite(self.s_fra)) and np.all(np.isfinite(self.s_fea))):
            raise EvaluationError("ScoreSeries contains non-finite scores")

    @property
    def s(self) -> np.ndarray:
        return self.s_fra + self.lambda_s * self.s_fea

    def __len__(self):
        return len(self.frame_index)

    def window(self, start: int) -> "ScoreSeries":
        """Keep frames with index >= start."""
        keep = self.frame_index >= start
        return ScoreSeries(self.frame_index[keep], self.s_fra[keep], self.s_fea[keep],
                           self.labels[keep], self.lambda_s)


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def normalize_per_video(series: ScoreSeries) -> ScoreSeries:
    """Min-max scale each score component to [0, 1] within one video."""
    if len(series) < 2:
        raise EvaluationError("per-video normalization needs at least 2 frames")
    return replace(series, s_fra=_minmax(series.s_fra), s_fea=_minmax(series.s_fea))


def frame_scores(params: dict, spec: mdl.ModelSpec, x: np.ndarray, y: np.ndarray, batch: int = 32):
    """Raw (s_fra, s_fea) per window; s_fea is zero for a model without the DPU."""
    s_fra, s_fea = [], []
    dtype = np.dtype(spec.ae.dtype)
    with no_grad():
        for i in range(0, len(x), batch):
            xb = Tensor(np.asarray(x[i : i + batch], dtype=dtype))
            yb = np.asarray(y[i : i + batch], dtype=dtype)
            fwd = mdl.forward(params, xb, spec)
            d = fwd.pred.data - yb
            s_fra.append((d * d).reshape(len(yb), -1).mean(axis=1))
            if spec.use_dpu:
                s_fea.append(loss_compact(fwd.vectors, fwd.prototypes, fwd.beta, per_item=True).data)
            else:
                s_fea.append(np.zeros(len(yb), dtype=dtype))
    return np.concatenate(s_fra).astype(np.float64), np.concatenate(s_fea).astype(np.float64)


def score_frames(params: dict, spec: mdl.ModelSpec, clip: VideoClip, lambda_s: float = 1.0,
                 normalize: bool = True) -> ScoreSeries:
    """Score every predictable frame (index >= T_in) of ``clip``."""
    x, y, idx = build_pairs(clip, spec.ae.input_frames)
    s_fra, s_fea = frame_scores(params, spec, x, y)
    series = ScoreSeries(idx, s_fra, s_fea, np.asarray(clip.labels)[idx].astype(np.uint8), lambda_s)
    return normalize_per_video(series) if normalize else series


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------

class RocCurve(NamedTuple):
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _check_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise EvaluationError(f"{len(scores)} scores for {len(labels)} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise EvaluationError("labels must be binary 0/1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise EvaluationError("AUC needs at least one positive and one negative label")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    return scores, labels


def auc(scores, labels) -> float:
    """Mann-Whitney statistic P(pos > neg) + P(tie) / 2 via mid-ranks."""
    scores, labels = _check_labels(scores, labels)
    ranks = rankdata(scores, method="average")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairs(scores, labels) -> float:
    """Brute-force pair count over every (negative, positive) pair."""
    scores, labels = _check_labels(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    wins = 0.0
    for p in pos:
        wins += float(np.sum(p > neg)) + 0.5 * float(np.sum(p == neg))
    return wins / (len(pos) * len(neg))


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep from +inf down through every distinct score; trapezoid area."""
    scores, labels = _check_labels(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(l)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / l.sum()]
    fpr = np.r_[0.0, fps / (~l).sum()]
    thresholds = np.r_[np.inf, s[distinct]]
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, area)


def aggregate_auc(series: Sequence[ScoreSeries], component: str = "s", how: str = "concat") -> float:
    """AUC over several videos: concatenate per-video scores, or average per-video AUCs."""
    if how == "concat":
        scores = np.concatenate([getattr(s, component) for s in series])
        labels = np.concatenate([s.labels for s in series])
        return auc(scores, labels)
    if how == "mean":
        return float(np.mean([auc(getattr(s, component), s.labels) for s in series]))
    raise EvaluationError(f"unknown aggregation {how!r}")


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_scores_csv(path, series: ScoreSeries) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame_index", "s_fra", "s_fea", "s", "label"])
        for i, a, b, c, l in zip(series.frame_index, series.s_fra, series.s_fea, series.s, series.labels):
            wr.writerow([int(i), repr(float(a)), repr(float(b)), repr(float(c)), int(l)])


def read_scores_csv(path, lambda_s: float = 1.0) -> ScoreSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame_index", "s_fra", "s_fea", "s", "label"]:
        raise DataError(f"{path}: not a score CSV")
    body = rows[1:]
    return ScoreSeries(
        np.array([int(r[0]) for r in body], dtype=np.int64),
        np.array([float(r[1]) for r in body]),
        np.array([float(r[2]) for r in body]),
        np.array([int(r[4]) for r in body], dtype=np.uint8),
        lambda_s,
    )


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            wr.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def write_summary(path, per_video: dict, aggregate: dict, extra: Optional[dict] = None) -> None:
    payload = {"per_video": per_video, "aggregate": aggregate}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
