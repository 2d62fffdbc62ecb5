"""Deterministic synthetic multi-scene video benchmark.

Scenes are moving sprites over a static background.  Everything is a pure
function of (spec, seed), so a manifest of specs and seeds regenerates the
benchmark bit for bit.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, FormatError

SHAPES = ("square", "disc", "cross")
ANOMALY_SHAPES = SHAPES + ("ring",)
BACKGROUNDS = ("flat", "gradient", "checker", "noise")
TRAJECTORIES = ("linear-bounce", "sinusoid")
ANOMALY_TYPES = ("unseen-shape", "speed-multiplier", "teleport")
ROLES = ("meta-train", "target")


@dataclass
class ObjectSpec:
    shape: str = "square"
    size: float = 8.0
    speed: float = 1.0
    trajectory: str = "linear-bounce"
    intensity: float = 0.8
    jitter: float = 0.0             # std (radians) of a per-frame heading change

    def validate(self, frame_size: Tuple[int, int]) -> None:
        if self.shape not in SHAPES:
            raise ConfigError(f"objects.shape: unknown shape {self.shape!r} (expected one of {SHAPES})")
        if self.trajectory not in TRAJECTORIES:
            raise ConfigError(f"objects.trajectory: unknown trajectory {self.trajectory!r}")
        if not 0 < self.size < min(frame_size):
            raise ConfigError(f"objects.size: {self.size} must be in (0, {min(frame_size)})")
        if self.speed < 0:
            raise ConfigError(f"objects.speed: {self.speed} must be >= 0")
        if not -1.0 <= self.intensity <= 1.0:
            raise ConfigError("objects.intensity must lie in [-1, 1]")
        if self.jitter < 0:
            raise ConfigError(f"objects.jitter: {self.jitter} must be >= 0")


@dataclass
class SceneSpec:
    scene_id: str
    background: str = "flat"
    background_seed: int = 0
    objects: List[ObjectSpec] = field(default_factory=lambda: [ObjectSpec()])
    frame_size: Tuple[int, int] = (64, 64)
    frame_count: int = 500
    frame_channels: int = 1
    noise: float = 0.0              # std of per-frame Gaussian sensor noise
    flicker: float = 0.0            # std of a per-frame global brightness offset

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]

    def validate(self) -> None:
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"background: unknown kind {self.background!r} (expected one of {BACKGROUNDS})")
        if len(self.frame_size) != 2 or min(self.frame_size) < 4:
            raise ConfigError(f"frame_size: {self.frame_size} too small")
        if self.frame_count < 1:
            raise ConfigError("frame_count must be >= 1")
        if self.frame_channels < 1:
            raise ConfigError("frame_channels must be >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise: {self.noise} must be >= 0")
        if self.flicker < 0:
            raise ConfigError(f"flicker: {self.flicker} must be >= 0")
        for obj in self.objects:
            obj.validate(self.frame_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class AnomalySpec:
    type: str
    start_frame: int
    end_frame: int
    params: dict = field(default_factory=dict)

    def validate(self, frame_count: int) -> None:
        if self.type not in ANOMALY_TYPES:
            raise ConfigError(f"anomaly type: unknown {self.type!r} (expected one of {ANOMALY_TYPES})")
        if not 0 <= self.start_frame < self.end_frame <= frame_count:
            raise ConfigError(
                f"anomaly interval [{self.start_frame}, {self.end_frame}) outside clip of {frame_count} frames"
            )


@dataclass
class VideoClip:
    frames: np.ndarray               # (F, c, h, w) float32 in [-1, 1]
    labels: np.ndarray               # (F,) uint8, 1 = anomalous
    scene: Optional[SceneSpec] = None
    seed: Optional[int] = None
    anomalies: List[AnomalySpec] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _bounds(size: float, extent: int) -> Tuple[float, float]:
    return size / 2.0, extent - size / 2.0


def reflect_walk(pos: float, vel: float, lo: float, hi: float, steps: int) -> Tuple[np.ndarray, float]:
    """Step-by-step 1-D walk reflecting at [lo, hi]; returns positions and final velocity."""
    out = np.empty(steps)
    for t in range(steps):
        out[t] = pos
        pos, vel = _reflect_step(pos, vel, lo, hi)
    return out, vel


def _initial_state(obj: ObjectSpec, frame_size, rng: np.random.Generator):
    h, w = frame_size
    lo_x, hi_x = _bounds(obj.size, w)
    lo_y, hi_y = _bounds(obj.size, h)
    start = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
    angle = rng.uniform(0, 2 * np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    return start, angle, phase


def _reflect_step(pos: float, vel: float, lo: float, hi: float):
    pos += vel
    while pos > hi or pos < lo:
        if pos > hi:
            pos, vel = 2 * hi - pos, -vel
        if pos < lo:
            pos, vel = 2 * lo - pos, -vel
    return pos, vel


def _track(obj: ObjectSpec, frame_size, start, angle, phase, profile, turns=None) -> np.ndarray:
    """Object centres (len(profile), 2) as (x, y); ``profile[t]`` scales the step t-1 -> t.

    ``turns[t]`` rotates the heading before step t (linear-bounce only).
    """
    h, w = frame_size
    lo_x, hi_x = _bounds(obj.size, w)
    lo_y, hi_y = _bounds(obj.size, h)
    steps = len(profile)
    out = np.empty((steps, 2))
    x, y = float(start[0]), float(start[1])
    if obj.trajectory == "linear-bounce":
        vx, vy = obj.speed * np.cos(angle), obj.speed * np.sin(angle)
        for t in range(steps):
            if t:
                if turns is not None and turns[t]:
                    c, s = np.cos(turns[t]), np.sin(turns[t])
                    vx, vy = c * vx - s * vy, s * vx + c * vy
                m = profile[t]
                x, fx = _reflect_step(x, vx * m, lo_x, hi_x)
                y, fy = _reflect_step(y, vy * m, lo_y, hi_y)
                vx = -vx if fx * vx * m < 0 else vx
                vy = -vy if fy * vy * m < 0 else vy
            out[t] = x, y
        return out
    # sinusoid: horizontal bounce, vertical oscillation around the start row
    vx = obj.speed if np.cos(angle) >= 0 else -obj.speed
    amp = min(y - lo_y, hi_y - y, h / 6.0)
    omega = obj.speed / max(amp, 1.0)
    theta = phase
    for t in range(steps):
        if t:
            m = profile[t]
            x, fx = _reflect_step(x, vx * m, lo_x, hi_x)
            vx = -vx if fx * vx * m < 0 else vx
            theta += omega * m
        out[t] = x, start[1] + amp * np.sin(theta)
    return out


def _states(spec: SceneSpec, seed: int):
    rng = np.random.default_rng([seed, 17])
    return [_initial_state(obj, spec.frame_size, rng) for obj in spec.objects]


def object_tracks(spec: SceneSpec, seed: int, profiles: Optional[dict] = None) -> List[np.ndarray]:
    """Centre tracks per object; ``profiles`` maps object index -> per-frame speed scale."""
    profiles = profiles or {}
    ones = np.ones(spec.frame_count)
    out = []
    for k, (obj, (st, ang, ph)) in enumerate(zip(spec.objects, _states(spec, seed))):
        turns = None
        if obj.jitter > 0:
            turns = np.random.default_rng([seed, 41, k]).normal(0.0, obj.jitter, size=spec.frame_count)
        out.append(_track(obj, spec.frame_size, st, ang, ph, profiles.get(k, ones), turns))
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_background(kind: str, seed: int, frame_size) -> np.ndarray:
    h, w = frame_size
    rng = np.random.default_rng([seed, 101])
    base = rng.uniform(-0.9, -0.5)
    if kind == "flat":
        return np.full((h, w), base)
    if kind == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(ang) * xx / w + np.sin(ang) * yy / h)
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
        return base + 0.35 * ramp
    if kind == "checker":
        cell = int(rng.integers(max(2, min(h, w) // 16), max(3, min(h, w) // 4) + 1))
        yy, xx = np.mgrid[0:h, 0:w]
        return base + 0.25 * (((yy // cell) + (xx // cell)) % 2)
    if kind == "noise":
        out = np.zeros((h, w))
        amp = 0.25
        for octave in (4, 8, 16):
            grid = rng.uniform(-1, 1, size=(octave + 1, octave + 1))
            ys = np.linspace(0, octave, h, endpoint=False)
            xs = np.linspace(0, octave, w, endpoint=False)
            y0, x0 = ys.astype(int), xs.astype(int)
            fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
            fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
            g00 = grid[np.ix_(y0, x0)]
            g01 = grid[np.ix_(y0, x0 + 1)]
            g10 = grid[np.ix_(y0 + 1, x0)]
            g11 = grid[np.ix_(y0 + 1, x0 + 1)]
            out += amp * ((g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy)
            amp /= 2
        return base + out
    raise ConfigError(f"background: unknown kind {kind!r}")


def shape_mask(shape: str, size: float, center, frame_size) -> np.ndarray:
    h, w = frame_size
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx + 0.5 - center[0]
    dy = yy + 0.5 - center[1]
    r = size / 2.0
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "cross":
        arm = max(r / 3.0, 0.75)
        return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ConfigError(f"unknown shape {shape!r}")


def _render(spec: SceneSpec, background, tracks, shapes, t: int, seed: int) -> np.ndarray:
    img = background.copy()
    for obj, track, shape in zip(spec.objects, tracks, shapes):
        mask = shape_mask(shape[t], obj.size, track[t], spec.frame_size)
        img[mask] = obj.intensity
    if spec.noise > 0:
        # keyed on the frame index so re-rendered anomaly frames keep their noise
        img = img + np.random.default_rng([seed, 31, t]).normal(0.0, spec.noise, size=img.shape)
    if spec.flicker > 0:
        img = img + np.random.default_rng([seed, 37, t]).normal(0.0, spec.flicker)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    return np.repeat(img[None], spec.frame_channels, axis=0)


def generate_scene(spec: SceneSpec, seed: int) -> VideoClip:
    """Render a normal-only clip; labels are all zero."""
    spec.validate()
    background = render_background(spec.background, spec.background_seed, spec.frame_size)
    tracks = object_tracks(spec, seed)
    shapes = [[o.shape] * spec.frame_count for o in spec.objects]
    frames = np.stack([_render(spec, background, tracks, shapes, t, seed) for t in range(spec.frame_count)])
    return VideoClip(frames, np.zeros(spec.frame_count, dtype=np.uint8), spec, seed, [])


def inject_anomaly(clip: VideoClip, anomaly: AnomalySpec, seed: int = 0) -> VideoClip:
    """Re-render frames in [start, end) with the anomaly and label exactly that interval.

    Parameters (``anomaly.params``): ``object`` index (default 0); ``multiplier``
    for speed-multiplier (default 3); ``shape`` for unseen-shape (default: the
    first shape absent from the scene).
    """
    if clip.scene is None or clip.seed is None:
        raise DataError("inject_anomaly needs a clip generated from a SceneSpec")
    spec = clip.scene
    anomaly.validate(len(clip.frames))
    k = int(anomaly.params.get("object", 0))
    if not 0 <= k < len(spec.objects):
        raise ConfigError(f"anomaly object index {k} out of range")
    s, e = anomaly.start_frame, anomaly.end_frame
    obj = spec.objects[k]
    background = render_background(spec.background, spec.background_seed, spec.frame_size)
    tracks = [t.copy() for t in object_tracks(spec, clip.seed)]
    shapes = [[o.shape] * spec.frame_count for o in spec.objects]
    rng = np.random.default_rng([seed, 29])

    if anomaly.type == "unseen-shape":
        present = {o.shape for o in spec.objects}
        new_shape = anomaly.params.get("shape") or next(x for x in ANOMALY_SHAPES if x not in present)
        if new_shape not in ANOMALY_SHAPES:
            raise ConfigError(f"anomaly shape {new_shape!r} unknown")
        for t in range(s, e):
            shapes[k][t] = new_shape
    elif anomaly.type == "speed-multiplier":
        mult = float(anomaly.params.get("multiplier", 3.0))
        if mult < 0:
            raise ConfigError("multiplier must be >= 0")
        profile = np.ones(spec.frame_count)
        profile[s:e] = mult
        tracks[k][s:e] = object_tracks(spec, clip.seed, {k: profile})[k][s:e]
    else:
        h, w = spec.frame_size
        lo_x, hi_x = _bounds(obj.size, w)
        lo_y, hi_y = _bounds(obj.size, h)
        tracks[k][s:e, 0] = rng.uniform(lo_x, hi_x, size=e - s)
        tracks[k][s:e, 1] = rng.uniform(lo_y, hi_y, size=e - s)

    frames = np.array(clip.frames, copy=True)
    for t in range(s, e):
        frames[t] = _render(spec, background, tracks, shapes, t, clip.seed)
    labels = np.array(clip.labels, copy=True)
    labels[s:e] = 1
    return VideoClip(frames, labels, spec, clip.seed, list(clip.anomalies) + [anomaly])


# ---------------------------------------------------------------------------
# sliding-window pairs
# ---------------------------------------------------------------------------

def build_pairs(clip, input_frames: int):
    """(x, y, frame_index) with x the ``input_frames`` preceding frames stacked on channels."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    n = len(frames)
    if n <= input_frames:
        raise DataError(f"clip of {n} frames too short for {input_frames} input frames (need > {input_frames})")
    f, c, h, w = frames.shape
    windows = np.lib.stride_tricks.sliding_window_view(frames, input_frames, axis=0)[: n - input_frames]
    # windows: (P, c, h, w, T) -> (P, T, c, h, w) -> (P, T*c, h, w)
    x = np.ascontiguousarray(np.moveaxis(windows, -1, 1)).reshape(n - input_frames, input_frames * c, h, w)
    y = frames[input_frames:]
    idx = np.arange(input_frames, n)
    return x, y, idx


# ---------------------------------------------------------------------------
# NDVF container and dataset directory
# ---------------------------------------------------------------------------

NDVF_MAGIC = b"NDVF"
NDVF_VERSION = 1
_HEADER = struct.Struct("<4sHIBHHB")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def encode_frames(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise DataError(f"frames must be (F, c, h, w), got {frames.shape}")
    tag = _TAGS.get(frames.dtype)
    if tag is None:
        raise FormatError(f"unsupported frame dtype {frames.dtype}")
    f, c, h, w = frames.shape
    header = _HEADER.pack(NDVF_MAGIC, NDVF_VERSION, f, c, h, w, tag)
    return header + np.ascontiguousarray(frames, dtype=_DTYPES[tag]).tobytes()


def decode_frames(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated NDVF header", len(buf))
    magic, version, f, c, h, w, tag = _HEADER.unpack_from(buf, 0)
    if magic != NDVF_MAGIC:
        raise FormatError("bad magic, expected NDVF", 0)
    if version != NDVF_VERSION:
        raise FormatError(f"unsupported NDVF version {version}", 4)
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}", _HEADER.size - 1)
    dt = _DTYPES[tag]
    need = _HEADER.size + f * c * h * w * dt.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated NDVF payload: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after NDVF payload", need)
    arr = np.frombuffer(buf, dtype=dt, offset=_HEADER.size, count=f * c * h * w)
    return arr.reshape(f, c, h, w).astype(dt.newbyteorder("="))


def write_labels(path, labels) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame_index", "label"])
        for i, v in enumerate(labels):
            wr.writerow([i, int(v)])


def read_labels(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read labels {path}: {exc}") from exc
    if not rows or rows[0] != ["frame_index", "label"]:
        raise FormatError(f"{path}: missing frame_index,label header", 0)
    out = []
    for k, row in enumerate(rows[1:]):
        if len(row) != 2 or int(row[0]) != k or row[1] not in ("0", "1"):
            raise FormatError(f"{path}: malformed label row {k + 1}: {row}")
        out.append(int(row[1]))
    return np.asarray(out, dtype=np.uint8)


@dataclass
class ClipEntry:
    name: str
    path: str
    labels: str
    seed: int
    anomalies: List[dict] = field(default_factory=list)


@dataclass
class SceneEntry:
    scene_id: str
    role: str
    spec: dict
    clips: List[ClipEntry]


@dataclass
class DatasetManifest:
    scenes: List[SceneEntry]
    seed: int = 0

    def to_dict(self) -> dict:
        return {"version": 1, "seed": self.seed, "scenes": [asdict(s) for s in self.scenes]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        scenes = []
        for s in d["scenes"]:
            if s["role"] not in ROLES:
                raise FormatError(f"manifest: unknown role {s['role']!r}")
            scenes.append(SceneEntry(s["scene_id"], s["role"], s["spec"], [ClipEntry(**c) for c in s["clips"]]))
        return cls(scenes, d.get("seed", 0))

    def by_role(self, role: str) -> List[SceneEntry]:
        return [s for s in self.scenes if s.role == role]


def regenerate(scene: SceneEntry, clip: ClipEntry) -> VideoClip:
    spec = SceneSpec.from_dict(scene.spec)
    out = generate_scene(spec, clip.seed)
    for k, a in enumerate(clip.anomalies):
        out = inject_anomaly(out, AnomalySpec(**a["spec"]), a["seed"])
    return out


def write_dataset(manifest: DatasetManifest, clips: Dict[str, VideoClip], directory) -> Path:
    """Write NDVF frames, label CSVs and manifest.json; ``clips`` is keyed by ClipEntry.name."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for scene in manifest.scenes:
        for entry in scene.clips:
            clip = clips[entry.name]
            if scene.role == "meta-train" and clip.labels.any():
                raise DataError(f"meta-train clip {entry.name} carries anomalous labels")
            (d / entry.path).write_bytes(encode_frames(clip.frames))
            write_labels(d / entry.labels, clip.labels)
    (d / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return d


def read_dataset(directory):
    d = Path(directory)
    try:
        manifest = DatasetManifest.from_dict(json.loads((d / "manifest.json").read_text()))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read manifest in {d}: {exc}") from exc
    clips = {}
    for scene in manifest.scenes:
        spec = SceneSpec.from_dict(scene.spec)
        for entry in scene.clips:
            try:
                buf = (d / entry.path).read_bytes()
            except OSError as exc:
                raise DataError(f"missing clip file {entry.path}") from exc
            frames = decode_frames(buf)
            labels = read_labels(d / entry.labels)
            if len(labels) != len(frames):
                raise FormatError(f"{entry.labels}: {len(labels)} labels for {len(frames)} frames")
            anomalies = [AnomalySpec(**a["spec"]) for a in entry.anomalies]
            clips[entry.name] = VideoClip(frames, labels, spec, entry.seed, anomalies)
    return manifest, clips


# ---------------------------------------------------------------------------
# default benchmark
# ---------------------------------------------------------------------------

def default_benchmark(seed: int = 0, frame_size=(64, 64), frame_count: int = 500,
                      n_meta: int = 8, n_target: int = 3, adapt_prefix: int = 50,
                      noise: float = 0.0, flicker: float = 0.0, multiplier: float = 3.0,
                      target_objects: int = 1, jitter: float = 0.0,
                      meta_shapes: Sequence[str] = ("square", "disc"), target_shapes: Sequence[str] = ("cross",)):
    """Build (manifest, clips) for the default benchmark.

    Meta-train scenes use ``meta_shapes`` (squares and discs) at speeds 1-2
    (scaled to the frame size); target scenes use ``target_shapes``
    (crosses) at faster speeds.  Every target
    scene has a normal ``train`` clip and a ``test`` clip whose anomalies
    all start after ``adapt_prefix`` frames.
    """
    for key, names in (("meta_shapes", meta_shapes), ("target_shapes", target_shapes)):
        bad = [n for n in names if n not in SHAPES] or ([] if names else ["<empty>"])
        if bad:
            raise ConfigError(f"data.{key}: unknown shape {bad[0]!r} (expected one of {SHAPES})")
    rng = np.random.default_rng([seed, 3])
    scale = min(frame_size) / 64.0
    scenes, clips = [], {}
    for i in range(n_meta):
        n_obj = int(rng.integers(1, 3))
        objs = [
            ObjectSpec(
                shape=str(rng.choice(list(meta_shapes))),
                size=float(np.round(rng.uniform(9, 14) * scale, 1)),
                speed=float(np.round(rng.uniform(1.0, 2.0) * scale, 2)),
                trajectory=str(rng.choice(TRAJECTORIES)),
                intensity=float(np.round(rng.uniform(0.3, 0.9), 2)),
            )
            for _ in range(n_obj)
        ]
        spec = SceneSpec(f"meta{i:02d}", BACKGROUNDS[i % 4], int(rng.integers(1 << 30)), objs,
                         frame_size, frame_count, noise=noise, flicker=flicker)
        cseed = int(rng.integers(1 << 30))
        name = f"{spec.scene_id}_train"
        clips[name] = generate_scene(spec, cseed)
        scenes.append(SceneEntry(spec.scene_id, "meta-train", spec.to_dict(),
                                 [ClipEntry(name, f"{name}.ndvf", f"{name}.csv", cseed)]))
    for i in range(n_target):
        objs = [
            ObjectSpec(
                shape=str(target_shapes[(i + j) % len(target_shapes)]),
                size=float(np.round(rng.uniform(11, 15) * scale, 1)),
                speed=float(np.round(rng.uniform(2.2, 3.0) * scale, 2)),
                trajectory="linear-bounce",
                intensity=float(np.round(rng.uniform(0.3, 0.9), 2)),
                jitter=jitter,
            )
            for j in range(target_objects)
        ]
        spec = SceneSpec(f"target{i:02d}", BACKGROUNDS[(i + 1) % 4], int(rng.integers(1 << 30)), objs,
                         frame_size, frame_count, noise=noise, flicker=flicker)
        entries = []
        train_seed, test_seed = (int(v) for v in rng.integers(1 << 30, size=2))
        name = f"{spec.scene_id}_train"
        clips[name] = generate_scene(spec, train_seed)
        entries.append(ClipEntry(name, f"{name}.ndvf", f"{name}.csv", train_seed))
        name = f"{spec.scene_id}_test"
        clip = generate_scene(spec, test_seed)
        anomalies = _plan_anomalies(rng, frame_count, adapt_prefix, multiplier)
        recorded = []
        for a in anomalies:
            aseed = int(rng.integers(1 << 30))
            clip = inject_anomaly(clip, a, aseed)
            recorded.append({"spec": asdict(a), "seed": aseed})
        clips[name] = clip
        entries.append(ClipEntry(name, f"{name}.ndvf", f"{name}.csv", test_seed, recorded))
        scenes.append(SceneEntry(spec.scene_id, "target", spec.to_dict(), entries))
    return DatasetManifest(scenes, seed), clips


def _plan_anomalies(rng, frame_count: int, prefix: int, multiplier: float = 3.0) -> List[AnomalySpec]:
    """Three disjoint intervals (one per anomaly type) after the adaptation prefix."""
    usable = frame_count - prefix
    if usable < 12:
        raise ConfigError(f"frame_count {frame_count} leaves no room for anomalies after prefix {prefix}")
    seg = usable // 3
    out = []
    types = list(ANOMALY_TYPES)
    order = rng.permutation(3)
    for k in range(3):
        lo = prefix + k * seg
        length = max(3, int(seg * rng.uniform(0.25, 0.4)))
        start = lo + int(rng.integers(1, max(2, seg - length)))
        typ = types[order[k]]
        params = {"multiplier": multiplier} if typ == "speed-multiplier" else {}
        out.append(AnomalySpec(typ, start, min(start + length, frame_count), params))
    return out


def dataset_bytes(manifest: DatasetManifest) -> int:
    total = 0
    for s in manifest.scenes:
        spec = SceneSpec.from_dict(s.spec)
        h, w = spec.frame_size
        per = _HEADER.size + spec.frame_count * spec.frame_channels * h * w * 4
        total += per * len(s.clips)
    return total
