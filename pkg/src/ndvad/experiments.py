"""Ablation and few-shot harnesses on the synthetic benchmark.

Every study is a pure function of a :class:`Harness` and a seed.  The
harness defaults are a toy scale (32x32 frames, short clips, a few hundred
optimizer steps) so that a five-seed run fits on one CPU core.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import backbone, meta
from . import model as mdl
from . import scoring
from .backbone import AEConfig
from .dpu import LossWeights
from .errors import ConfigError
from .scenesynth import VideoClip, build_pairs, default_benchmark

STUDIES = ("component", "resolution", "prototypes")
PROTOTYPE_GRID = (1, 5, 10, 20, 40)
PLUG_GRID = (1, 2, 3, 4)
SHOT_GRID = (0, 1, 5, 10)


@dataclass
class Harness:
    frame_size: Tuple[int, int] = (32, 32)
    frame_count: int = 200
    n_meta: int = 8
    n_target: int = 3
    adapt_prefix: int = 50
    noise: float = 0.0
    flicker: float = 0.0
    multiplier: float = 3.0
    target_objects: int = 1
    jitter: float = 0.0
    ae: AEConfig = field(default_factory=lambda: AEConfig(frame_size=(32, 32), stage_channels=(8, 16, 32)))
    n_prototypes: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    pretrain_steps: int = 600
    train_steps: int = 600
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    meta: meta.MetaConfig = field(default_factory=lambda: meta.MetaConfig(
        k_shot=5, outer_lr_theta=0.01, outer_lr_alpha=0.01, alpha_init=0.05, episodes_per_batch=4))
    meta_steps: int = 100
    shots: Tuple[int, ...] = SHOT_GRID
    normalize: bool = True
    aggregate: str = "concat"

    def __post_init__(self):
        if isinstance(self.ae, dict):
            self.ae = AEConfig(**self.ae)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.meta, dict):
            self.meta = meta.MetaConfig(**self.meta)
        if tuple(self.ae.frame_size) != tuple(self.frame_size):
            raise ConfigError(f"ae.frame_size {self.ae.frame_size} != frame_size {self.frame_size}")

    def spec(self, **overrides) -> mdl.ModelSpec:
        kw = {"ae": self.ae, "n_prototypes": self.n_prototypes}
        kw.update(overrides)
        return mdl.ModelSpec(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        d["shots"] = list(self.shots)
        d["ae"] = self.ae.to_dict()
        return d


def benchmark(h: Harness, seed: int):
    return default_benchmark(seed, frame_size=tuple(h.frame_size), frame_count=h.frame_count,
                             n_meta=h.n_meta, n_target=h.n_target, adapt_prefix=h.adapt_prefix,
                             noise=h.noise, flicker=h.flicker, multiplier=h.multiplier, target_objects=h.target_objects,
                             jitter=h.jitter)


def _split(manifest, clips):
    train = [clips[c.name] for s in manifest.by_role("target") for c in s.clips if c.name.endswith("_train")]
    test = [clips[c.name] for s in manifest.by_role("target") for c in s.clips if c.name.endswith("_test")]
    meta_clips = [clips[c.name] for s in manifest.by_role("meta-train") for c in s.clips]
    return meta_clips, train, test


def _pairs(clip_list: Sequence[VideoClip], t_in: int):
    xs, ys = zip(*[build_pairs(c, t_in)[:2] for c in clip_list])
    return np.concatenate(xs), np.concatenate(ys)


def pretrain(h: Harness, clip_list, seed: int, steps: Optional[int] = None, ae: Optional[AEConfig] = None):
    ae = ae or h.ae
    x, y = _pairs(clip_list, ae.input_frames)
    params, log = backbone.pretrain(x, y, ae, steps if steps is not None else h.pretrain_steps, h.lr,
                                    seed=seed, batch_size=h.batch_size, momentum=h.momentum)
    return params, log


def train_dpu(h: Harness, spec: mdl.ModelSpec, clip_list, params: dict, seed: int, steps: Optional[int] = None):
    x, y = _pairs(clip_list, spec.ae.input_frames)
    params = mdl.add_dpu(params, spec, seed)
    return mdl.train(x, y, spec, params, steps if steps is not None else h.train_steps, h.lr, h.weights,
                     seed=seed + 1, batch_size=h.batch_size, momentum=h.momentum)


def evaluate(params, spec, test_clips, h: Harness, start: int = 0) -> Dict[str, float]:
    """AUC of the FP, FR and combined scores on frames with index >= start."""
    series = [scoring.score_frames(params, spec, c, h.weights.lambda_s, h.normalize).window(start)
              for c in test_clips]
    out = {"fp": scoring.aggregate_auc(series, "s_fra", h.aggregate)}
    if spec.use_dpu:
        out["fr"] = scoring.aggregate_auc(series, "s_fea", h.aggregate)
        out["both"] = scoring.aggregate_auc(series, "s", h.aggregate)
    s = np.concatenate([x.s for x in series])
    lab = np.concatenate([x.labels for x in series]).astype(bool)
    out["mean_s_anomalous"] = float(s[lab].mean())
    out["mean_s_normal"] = float(s[~lab].mean())
    return out


# ---------------------------------------------------------------------------
# ablations (unsupervised setting: train on target scenes' normal clips)
# ---------------------------------------------------------------------------

def _data(h: Harness, seed: int, data):
    return benchmark(h, seed) if data is None else data


def component_study(h: Harness, seed: int, data=None) -> List[dict]:
    manifest, clips = _data(h, seed, data)
    _, train, test = _split(manifest, clips)
    base_spec = h.spec(use_dpu=False)
    # baseline gets the same total step budget as pretrain + DPU training
    base, _ = pretrain(h, train, seed, h.pretrain_steps + h.train_steps)
    base_auc = evaluate(base, base_spec, test, h)
    spec = h.spec()
    pre, _ = pretrain(h, train, seed)
    params, _ = train_dpu(h, spec, train, pre, seed)
    auc = evaluate(params, spec, test, h)
    return [
        {"setting": "baseline-FP", "fp": base_auc["fp"], "fr": None, "both": base_auc["fp"]},
        {"setting": "DPU-FP", "fp": auc["fp"], "fr": auc["fr"], "both": auc["fp"]},
        {"setting": "DPU-FR", "fp": auc["fp"], "fr": auc["fr"], "both": auc["fr"]},
        {"setting": "DPU-both", "fp": auc["fp"], "fr": auc["fr"], "both": auc["both"],
         "mean_s_anomalous": auc["mean_s_anomalous"], "mean_s_normal": auc["mean_s_normal"]},
    ]


def resolution_study(h: Harness, seed: int, plugs: Sequence[int] = PLUG_GRID, data=None) -> List[dict]:
    manifest, clips = _data(h, seed, data)
    _, train, test = _split(manifest, clips)
    rows = []
    for plug in plugs:
        ae = replace(h.ae, plug_stage=plug)
        spec = h.spec(ae=ae)
        pre, _ = pretrain(h, train, seed, ae=ae)
        params, _ = train_dpu(h, spec, train, pre, seed)
        auc = evaluate(params, spec, test, h)
        c, hh, ww = backbone.plug_shape(ae)
        rows.append({"setting": f"plug{plug}", "resolution": f"{hh}x{ww}", "fp": auc["fp"],
                     "fr": auc["fr"], "both": auc["both"]})
    return rows


def prototype_study(h: Harness, seed: int, grid: Sequence[int] = PROTOTYPE_GRID, data=None) -> List[dict]:
    manifest, clips = _data(h, seed, data)
    _, train, test = _split(manifest, clips)
    pre, _ = pretrain(h, train, seed)
    rows = []
    for m in grid:
        spec = h.spec(n_prototypes=m)
        params, _ = train_dpu(h, spec, train, pre, seed)
        auc = evaluate(params, spec, test, h)
        rows.append({"setting": f"M={m}", "fp": auc["fp"], "fr": auc["fr"], "both": auc["both"]})
    return rows


def run_study(study: str, h: Harness, seed: int, data=None, plugs: Sequence[int] = PLUG_GRID,
              grid: Sequence[int] = PROTOTYPE_GRID) -> List[dict]:
    if study == "component":
        return component_study(h, seed, data)
    if study == "resolution":
        return resolution_study(h, seed, plugs, data)
    if study == "prototypes":
        return prototype_study(h, seed, grid, data)
    raise ConfigError(f"unknown study {study!r}; expected one of {STUDIES}")


# ---------------------------------------------------------------------------
# few-shot cross-scene protocol
# ---------------------------------------------------------------------------

def meta_pipeline(h: Harness, seed: int, manifest=None, clips=None):
    """Pretrain, DPU-train and meta-train on the meta-train scenes only."""
    if manifest is None:
        manifest, clips = benchmark(h, seed)
    meta_clips, _, _ = _split(manifest, clips)
    spec = h.spec()
    pre, _ = pretrain(h, meta_clips, seed)
    params, _ = train_dpu(h, spec, meta_clips, pre, seed)
    state = meta.init_state(params, spec, h.meta)
    log = meta.meta_train(state, meta_clips, h.meta, h.meta_steps, h.weights, seed=seed + 2)
    return state, log


def fewshot_eval(state: meta.MetaState, test_clips, h: Harness, shots: Sequence[int] = None) -> Dict[int, dict]:
    """Adapt on each clip's leading frames for every K and score the rest.

    AUC is computed on frames past the largest adaptation prefix so that
    every K is measured on the same frames.
    """
    shots = tuple(h.shots if shots is None else shots)
    t_in = state.spec.ae.input_frames
    start = max(shots) * (t_in + 1)
    out = {}
    for k in shots:
        series = []
        for c in test_clips:
            params = meta.adapt(state, c, k, h.meta, h.weights)
            series.append(scoring.score_frames(params, state.spec, c, h.weights.lambda_s, h.normalize).window(start))
        out[k] = {
            "both": scoring.aggregate_auc(series, "s", h.aggregate),
            "fp": scoring.aggregate_auc(series, "s_fra", h.aggregate),
            "fr": scoring.aggregate_auc(series, "s_fea", h.aggregate),
            "series": series,
        }
    return out


def fewshot_study(h: Harness, seed: int, data=None) -> List[dict]:
    manifest, clips = _data(h, seed, data)
    _, _, test = _split(manifest, clips)
    state, _ = meta_pipeline(h, seed, manifest, clips)
    res = fewshot_eval(state, test, h)
    return [{"setting": f"K={k}", "fp": r["fp"], "fr": r["fr"], "both": r["both"]} for k, r in res.items()]


def harness_from_config(cfg) -> Harness:
    """Map a :class:`~ndvad.config.RunConfig` onto a harness."""
    d, t, m = cfg["data"], cfg["train"], cfg["meta"]
    return Harness(
        frame_size=tuple(d["frame_size"]), frame_count=d["frame_count"], n_meta=d["n_meta"],
        n_target=d["n_target"], adapt_prefix=d["adapt_prefix"], noise=d["noise"], flicker=d["flicker"],
        multiplier=d["multiplier"], target_objects=d["target_objects"], jitter=d["jitter"],
        ae=cfg.ae(), n_prototypes=cfg["model"]["n_prototypes"], weights=cfg.weights(),
        pretrain_steps=t["pretrain_steps"], train_steps=t["dpu_steps"], lr=t["lr"],
        momentum=t["momentum"], batch_size=t["batch_size"], meta=cfg.meta(), meta_steps=m["steps"],
        shots=tuple(cfg["eval"]["shots"]), normalize=cfg["eval"]["normalize"],
        aggregate=cfg["eval"]["aggregate"],
    )
