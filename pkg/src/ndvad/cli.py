"""Command-line entry point: ``ndvad <command> [options]``.

Commands: synth, pretrain, train, meta-train, adapt-eval, ablate, dump-maps.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import backbone, experiments, meta
from . import model as mdl
from . import scoring
from .config import RunConfig
from .dpu import dump_maps
from .errors import ConfigError, DataError, NDVADError, StageError
from .ndtensor import Parameter, Tensor, checkpoint, no_grad
from .scenesynth import build_pairs, default_benchmark, read_dataset, write_dataset

STAGES = ("pretrain", "dpu", "meta")
_STAGE_KEY = "__stage__"
_SPEC_KEY = "__spec__"
_ALPHA = "alpha/"


# ---------------------------------------------------------------------------
# checkpoints and provenance
# ---------------------------------------------------------------------------

def _bytes_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def save_checkpoint(path, stage: str, spec: mdl.ModelSpec, tensors: dict) -> None:
    payload = {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in tensors.items()}
    payload[_STAGE_KEY] = _bytes_entry(stage)
    payload[_SPEC_KEY] = _bytes_entry(json.dumps(spec.to_dict(), sort_keys=True))
    checkpoint.save(path, payload)


def load_checkpoint(path, expected: str):
    """(spec, tensors) from a checkpoint whose stage tag must equal ``expected``."""
    try:
        raw = checkpoint.load(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    stage = bytes(raw.pop(_STAGE_KEY, np.zeros(0, np.uint8))).decode("utf-8") or "none"
    if stage != expected:
        raise StageError(f"expected stage {expected} checkpoint, got {stage!r} in {path}")
    spec_raw = raw.pop(_SPEC_KEY, None)
    if spec_raw is None:
        raise DataError(f"{path}: checkpoint carries no model spec")
    spec = mdl.ModelSpec(**json.loads(bytes(spec_raw).decode("utf-8")))
    return spec, raw


def _params(arrays: dict) -> dict:
    return {k: Parameter(v, k) for k, v in arrays.items()}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_provenance(path, cfg: RunConfig, stage: str, outputs: List[Path], inputs=()) -> None:
    """Config hash, seed, stage and a checksum of every output file."""
    record = {
        "stage": stage,
        "seed": cfg["seed"],
        "config_sha256": cfg.digest(),
        "inputs": {Path(p).name: _sha256(Path(p)) for p in inputs},
        "outputs": {Path(p).name: _sha256(Path(p)) for p in outputs},
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True))


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _dataset(args, cfg):
    return read_dataset(args.data or cfg["data_dir"])


def _clips(manifest, clips, which: str):
    if which == "meta":
        out = [clips[c.name] for s in manifest.by_role("meta-train") for c in s.clips]
    else:
        out = [clips[c.name] for s in manifest.by_role("target") for c in s.clips if c.name.endswith("_train")]
    if not out:
        raise DataError(f"dataset has no {which} training clips")
    return out


def _pairs(clip_list, t_in: int):
    xs, ys = zip(*[build_pairs(c, t_in)[:2] for c in clip_list])
    return np.concatenate(xs), np.concatenate(ys)


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg["data_dir"])
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty (use --force to overwrite)")
    d = cfg["data"]
    manifest, clips = default_benchmark(
        cfg["seed"], frame_size=tuple(d["frame_size"]), frame_count=d["frame_count"], n_meta=d["n_meta"],
        n_target=d["n_target"], adapt_prefix=d["adapt_prefix"], noise=d["noise"], flicker=d["flicker"],
        multiplier=d["multiplier"], target_objects=d["target_objects"], jitter=d["jitter"],
        meta_shapes=d["meta_shapes"], target_shapes=d["target_shapes"])
    write_dataset(manifest, clips, out)
    files = sorted(p for p in out.iterdir() if p.name != "provenance.json")
    write_provenance(out / "provenance.json", cfg, "synth", files)
    meta_n = len(manifest.by_role("meta-train"))
    target_n = len(manifest.by_role("target"))
    print(f"wrote {meta_n} meta-train + {target_n} target scenes ({len(clips)} clips) to {out}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    manifest, clips = _dataset(args, cfg)
    spec = cfg.spec()
    x, y = _pairs(_clips(manifest, clips, args.scenes), spec.ae.input_frames)
    t = cfg["train"]
    params, log = backbone.pretrain(x, y, spec.ae, t["pretrain_steps"], t["lr"], seed=cfg["seed"],
                                    batch_size=t["batch_size"], momentum=t["momentum"])
    return _finish_stage(args, cfg, "pretrain", spec, params, log)


def cmd_train(args, cfg: RunConfig) -> int:
    spec, arrays = load_checkpoint(args.init, "pretrain")
    spec = cfg.spec(ae=spec.ae)
    manifest, clips = _dataset(args, cfg)
    x, y = _pairs(_clips(manifest, clips, args.scenes), spec.ae.input_frames)
    t = cfg["train"]
    params = mdl.add_dpu(_params(arrays), spec, cfg["seed"])
    params, log = mdl.train(x, y, spec, params, t["dpu_steps"], t["lr"], cfg.weights(), seed=cfg["seed"] + 1,
                            batch_size=t["batch_size"], momentum=t["momentum"])
    return _finish_stage(args, cfg, "dpu", spec, params, log, [args.init])


def cmd_meta_train(args, cfg: RunConfig) -> int:
    spec, arrays = load_checkpoint(args.init, "dpu")
    manifest, clips = _dataset(args, cfg)
    mcfg = cfg.meta()
    state = meta.init_state(_params(arrays), spec, mcfg)
    log = meta.meta_train(state, _clips(manifest, clips, "meta"), mcfg, cfg["meta"]["steps"], cfg.weights(),
                          seed=cfg["seed"] + 2)
    tensors = dict(state.params())
    tensors.update({_ALPHA + k: v for k, v in state.alpha.items()})
    out = Path(args.out)
    sidecar = out.with_suffix(out.suffix + ".json")
    _dump_json(sidecar, {"meta_config": mcfg.to_dict(), "model": spec.to_dict(),
                         "clamp_events": state.clamp_events})
    return _finish_stage(args, cfg, "meta", spec, tensors, log, [args.init], extra=[sidecar])


def _finish_stage(args, cfg, stage, spec, tensors, log, inputs=(), extra=()) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, stage, spec, tensors)
    log_path = out.with_suffix(out.suffix + ".log.json")
    _dump_json(log_path, log)
    outputs = [out, log_path, *extra]
    write_provenance(out.with_suffix(out.suffix + ".provenance.json"), cfg, stage, outputs, inputs)
    print(f"{stage}: wrote {out} ({len(log)} logged steps)")
    return 0


def load_meta_state(path, cfg: RunConfig):
    """(state, meta config) from a meta checkpoint and its JSON sidecar."""
    spec, arrays = load_checkpoint(path, "meta")
    sidecar = Path(str(path) + ".json")
    mcfg = cfg.meta()
    if sidecar.exists():
        mcfg = meta.MetaConfig(**json.loads(sidecar.read_text())["meta_config"])
    alpha = {k[len(_ALPHA):]: Parameter(v, k[len(_ALPHA):]) for k, v in arrays.items() if k.startswith(_ALPHA)}
    theta = {k: Parameter(arrays[k], k) for k in alpha}
    eta = {k: Tensor(v) for k, v in arrays.items() if not k.startswith(_ALPHA) and k not in alpha}
    return meta.MetaState(theta, alpha, eta, spec), mcfg


def cmd_adapt_eval(args, cfg: RunConfig) -> int:
    state, mcfg = load_meta_state(args.ckpt, cfg)
    manifest, clips = _dataset(args, cfg)
    shots = [int(k) for k in args.shots.split(",")] if args.shots else list(cfg["eval"]["shots"])
    weights = cfg.weights()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = [(c.name, clips[c.name]) for s in manifest.by_role("target") for c in s.clips
            if c.name.endswith("_test")]
    if not test:
        raise DataError("dataset has no target test clips")
    start = max(shots) * (state.spec.ae.input_frames + 1)
    outputs = []
    summary = {}
    for k in shots:
        per_video, series = {}, []
        for name, clip in test:
            params = meta.adapt(state, clip, k, mcfg, weights)
            s = scoring.score_frames(params, state.spec, clip, weights.lambda_s, cfg["eval"]["normalize"])
            s = s.window(start)
            path = out / f"K{k}_{name}.csv"
            scoring.write_scores_csv(path, s)
            outputs.append(path)
            per_video[name] = scoring.auc(s.s, s.labels)
            series.append(s)
        agg = {
            "s": scoring.aggregate_auc(series, "s", cfg["eval"]["aggregate"]),
            "s_fra": scoring.aggregate_auc(series, "s_fra", cfg["eval"]["aggregate"]),
            "s_fea": scoring.aggregate_auc(series, "s_fea", cfg["eval"]["aggregate"]),
        }
        roc = out / f"K{k}_roc.csv"
        scoring.write_roc_csv(roc, scoring.roc_curve(np.concatenate([s.s for s in series]),
                                                     np.concatenate([s.labels for s in series])))
        path = out / f"K{k}_summary.json"
        scoring.write_summary(path, per_video, agg, {"K": k, "first_scored_frame": start})
        outputs += [roc, path]
        summary[str(k)] = agg["s"]
        print(f"K={k}: AUC {agg['s']:.4f} (FP {agg['s_fra']:.4f}, FR {agg['s_fea']:.4f})")
    write_provenance(out / "provenance.json", cfg, "adapt-eval", outputs, [args.ckpt])
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    data = _dataset(args, cfg)
    h = experiments.harness_from_config(cfg)
    rows = experiments.run_study(args.study, h, cfg["seed"], data, cfg["ablate"]["plug_stages"],
                                 cfg["ablate"]["prototypes"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["setting", "auc_fp", "auc_fr", "auc_combined"])
        for r in rows:
            fr = "" if r["fr"] is None else repr(float(r["fr"]))
            wr.writerow([r["setting"], repr(float(r["fp"])), fr, repr(float(r["both"]))])
    write_provenance(out.with_suffix(out.suffix + ".provenance.json"), cfg, f"ablate-{args.study}", [out])
    for r in rows:
        print(f"{r['setting']}: {r['both']:.4f}")
    return 0


def cmd_dump_maps(args, cfg: RunConfig) -> int:
    stage = args.stage
    if stage == "meta":
        state, _ = load_meta_state(args.ckpt, cfg)
        spec, params = state.spec, state.params()
    else:
        spec, arrays = load_checkpoint(args.ckpt, stage)
        params = _params(arrays)
    if not spec.use_dpu:
        raise ConfigError("checkpoint has no prototype unit")
    _, clips = _dataset(args, cfg)
    if args.clip not in clips:
        raise DataError(f"unknown clip {args.clip!r}")
    x, _, idx = build_pairs(clips[args.clip], spec.ae.input_frames)
    hits = np.flatnonzero(idx == args.frame)
    if not hits.size:
        raise DataError(f"frame {args.frame} has no prediction window (first is {idx[0]})")
    with no_grad():
        fwd = mdl.forward(params, Tensor(x[hits[:1]].astype(spec.ae.dtype)), spec)
    _, h, w = backbone.plug_shape(spec.ae)
    written = dump_maps(fwd.weights, (h, w), args.out, args.frame)
    print(f"wrote {len(written)} maps to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndvad", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed and NDVAD_SEED")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.lr=0.01 (repeatable)")
    common.add_argument("--data", help="dataset directory (default: config data_dir)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic benchmark")
    s.add_argument("--out", help="output directory (default: config data_dir)")
    s.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="train the backbone on frame prediction")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", choices=("meta", "target"), default="meta")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="train the prototype unit and decoder")
    s.add_argument("--init", required=True, help="pretrain-stage checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", choices=("meta", "target"), default="meta")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("meta-train", parents=[common], help="meta-learn initialization and step sizes")
    s.add_argument("--init", required=True, help="dpu-stage checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_meta_train)

    s = sub.add_parser("adapt-eval", parents=[common], help="K-shot adapt, score and evaluate")
    s.add_argument("--ckpt", required=True, help="meta-stage checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--shots", help="comma-separated K list (default: config eval.shots)")
    s.set_defaults(func=cmd_adapt_eval)

    s = sub.add_parser("ablate", parents=[common], help="run an ablation study")
    s.add_argument("--study", required=True, choices=experiments.STUDIES)
    s.add_argument("--out", required=True, help="table CSV")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("dump-maps", parents=[common], help="write normalcy maps as PGM images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--stage", choices=("dpu", "meta"), default="dpu")
    s.add_argument("--clip", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_maps)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set, args.seed)
        return args.func(args, cfg)
    except NDVADError as exc:
        print(f"ndvad {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
