"""Run configuration: one JSON file, documented defaults, strict keys.

Precedence is command-line overrides > config file > defaults.  The
``NDVAD_SEED`` environment variable replaces the seed from any source
except an explicit ``--seed`` flag.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .backbone import AEConfig
from .dpu import LossWeights
from .errors import ConfigError
from .meta import MetaConfig
from .model import ModelSpec
from .scenesynth import SHAPES

DEFAULTS: dict = {
    "seed": 0,
    "precision": "float32",
    "data_dir": "data",
    "output_dir": "runs",
    "data": {
        "frame_size": [64, 64],
        "frame_count": 500,
        "n_meta": 8,
        "n_target": 3,
        "adapt_prefix": 50,
        "noise": 0.0,
        "flicker": 0.0,
        "multiplier": 3.0,
        "target_objects": 1,
        "jitter": 0.0,
        "meta_shapes": ["square", "disc"],
        "target_shapes": ["cross"],
    },
    "model": {
        "input_frames": 4,
        "frame_channels": 1,
        "stage_channels": [16, 32, 64],
        "plug_stage": 3,
        "kernel": 3,
        "n_prototypes": 10,
        "beta_mode": "softmax",
        "detach_features": True,
    },
    "loss": {"lambda1": 1.0, "lambda2": 0.01, "gamma": 1.0, "lambda_s": 1.0},
    "train": {
        "pretrain_steps": 2000,
        "dpu_steps": 2000,
        "lr": 0.05,
        "momentum": 0.9,
        "batch_size": 8,
    },
    "meta": {
        "steps": 1000,
        "k_shot": 5,
        "inner_steps": 1,
        "mode": "exact",
        "outer_lr_theta": 1e-5,
        "outer_lr_alpha": 1e-5,
        "episodes_per_batch": 10,
        "alpha_init": 1e-4,
        "alpha_max": 1.0,
    },
    "eval": {"shots": [0, 1, 5, 10], "normalize": True, "aggregate": "concat"},
    "ablate": {"prototypes": [1, 5, 10, 20, 40], "plug_stages": [1, 2, 3, 4]},
}


def _merge(base: dict, update: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` -> nested dict; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    path, raw = text.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = path.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


class RunConfig:
    """Validated, fully-resolved configuration."""

    def __init__(self, values: Optional[Mapping] = None):
        self.values = _merge(DEFAULTS, values or {})
        self._validate()

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = (), seed: Optional[int] = None,
             env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        env = os.environ if env is None else env
        values: dict = {}
        if path is not None:
            try:
                values = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
            if not isinstance(values, dict):
                raise ConfigError(f"config file {path}: top level must be an object")
        merged = _merge(DEFAULTS, values)
        if env.get("NDVAD_SEED"):
            try:
                merged["seed"] = int(env["NDVAD_SEED"])
            except ValueError:
                raise ConfigError(f"NDVAD_SEED={env['NDVAD_SEED']!r} is not an integer") from None
        for text in overrides:
            merged = _merge(merged, parse_override(text))
        if seed is not None:
            merged["seed"] = int(seed)
        return cls(merged)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- typed views ---------------------------------------------------------

    def ae(self) -> AEConfig:
        m = self.values["model"]
        return AEConfig(
            input_frames=m["input_frames"],
            frame_size=tuple(self.values["data"]["frame_size"]),
            frame_channels=m["frame_channels"],
            stage_channels=tuple(m["stage_channels"]),
            plug_stage=m["plug_stage"],
            kernel=m["kernel"],
            dtype=self.values["precision"],
        )

    def spec(self, **overrides) -> ModelSpec:
        m = self.values["model"]
        kw = dict(ae=self.ae(), n_prototypes=m["n_prototypes"], beta_mode=m["beta_mode"],
                  detach_features=m["detach_features"])
        kw.update(overrides)
        return ModelSpec(**kw)

    def weights(self) -> LossWeights:
        return LossWeights(**self.values["loss"])

    def meta(self) -> MetaConfig:
        m = dict(self.values["meta"])
        m.pop("steps")
        return MetaConfig(**m)

    def _validate(self) -> None:
        v = self.values
        if v["precision"] not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {v['precision']!r}")
        if not isinstance(v["seed"], int) or v["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        for k in ("pretrain_steps", "dpu_steps", "batch_size"):
            if not isinstance(v["train"][k], int) or v["train"][k] < 0:
                raise ConfigError(f"train.{k} must be a non-negative integer")
        if v["train"]["lr"] <= 0:
            raise ConfigError("train.lr must be > 0")
        if any((not isinstance(k, int)) or k < 0 for k in v["eval"]["shots"]):
            raise ConfigError("eval.shots must be non-negative integers")
        if v["eval"]["aggregate"] not in ("concat", "mean"):
            raise ConfigError("eval.aggregate must be concat or mean")
        for key in ("meta_shapes", "target_shapes"):
            names = v["data"][key]
            if not isinstance(names, list) or not names:
                raise ConfigError(f"data.{key} must be a non-empty list of shape names")
            bad = [n for n in names if n not in SHAPES]
            if bad:
                raise ConfigError(f"data.{key}: unknown shape {bad[0]!r} (expected one of {SHAPES})")
        # typed constructors raise ConfigError naming the offending field
        self.ae().validate()
        self.spec()
        self.weights()
        self.meta()
