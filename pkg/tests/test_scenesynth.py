import numpy as np
import pytest

from ndvad import scenesynth as ss
from ndvad.errors import ConfigError, DataError, FormatError
from ndvad.scenesynth import AnomalySpec, ObjectSpec, SceneSpec


def scene(**kw):
    base = dict(scene_id="s", background="flat", objects=[ObjectSpec("square", 8, 2.0)],
                frame_size=(32, 32), frame_count=60)
    base.update(kw)
    return SceneSpec(**base)


def mirror(p0, v, lo, hi, t):
    """Closed-form reflecting walk: fold the free path into [lo, hi] with a triangle wave."""
    span = hi - lo
    u = np.mod(p0 - lo + v * t, 2 * span)
    return lo + np.where(u <= span, u, 2 * span - u)


def centroid(frame, background):
    ys, xs = np.nonzero(frame[0] != np.float32(background))
    return np.array([xs.mean() + 0.5, ys.mean() + 0.5])


class TestGenerate:
    def test_deterministic(self):
        a, b = ss.generate_scene(scene(), 4), ss.generate_scene(scene(), 4)
        assert a.frames.tobytes() == b.frames.tobytes()
        assert not a.labels.any()

    def test_static_scene(self):
        clip = ss.generate_scene(scene(objects=[ObjectSpec(speed=0.0)]), 1)
        assert np.all(clip.frames == clip.frames[0])

    @pytest.mark.parametrize("background", ss.BACKGROUNDS)
    def test_pixel_range(self, background):
        clip = ss.generate_scene(scene(background=background, noise=0.5, flicker=0.3), 2)
        assert clip.frames.dtype == np.float32
        assert clip.frames.min() >= -1.0 and clip.frames.max() <= 1.0

    def test_linear_bounce_matches_mirror_oracle(self):
        spec = scene(objects=[ObjectSpec("square", 8, 2.0)], frame_size=(64, 64), frame_count=200)
        track = ss.object_tracks(spec, seed=9)[0]
        (start, angle, _), = ss._states(spec, 9)
        t = np.arange(200)
        for axis, comp in enumerate((np.cos(angle), np.sin(angle))):
            expected = mirror(start[axis], 2.0 * comp, 4.0, 60.0, t)
            np.testing.assert_allclose(track[:, axis], expected, atol=1e-9)

    def test_rendered_centroid_follows_track(self):
        spec = scene(objects=[ObjectSpec("square", 8, 2.0, intensity=0.9)], frame_size=(64, 64))
        clip = ss.generate_scene(spec, 3)
        bg = ss.render_background("flat", spec.background_seed, spec.frame_size)[0, 0]
        track = ss.object_tracks(spec, 3)[0]
        for t in (0, 17, 45):
            np.testing.assert_allclose(centroid(clip.frames[t], bg), track[t], atol=0.75)

    @pytest.mark.parametrize("bad,key", [
        (dict(objects=[ObjectSpec("triangle")]), "objects.shape"),
        (dict(objects=[ObjectSpec(size=40)]), "objects.size"),
        (dict(objects=[ObjectSpec(speed=-1)]), "objects.speed"),
        (dict(background="plaid"), "background"),
    ])
    def test_invalid_spec_names_key(self, bad, key):
        with pytest.raises(ConfigError, match=key):
            ss.generate_scene(scene(**bad), 0)


class TestInject:
    @pytest.mark.parametrize("typ", ss.ANOMALY_TYPES)
    def test_labels_and_locality(self, typ):
        clip = ss.generate_scene(scene(), 5)
        out = ss.inject_anomaly(clip, AnomalySpec(typ, 20, 31), seed=1)
        assert out.labels.sum() == 11
        assert np.all(out.labels[20:31] == 1)
        assert out.frames[:20].tobytes() == clip.frames[:20].tobytes()
        assert out.frames[31:].tobytes() == clip.frames[31:].tobytes()
        assert not np.array_equal(out.frames[20:31], clip.frames[20:31])

    def test_speed_multiplier_triples_displacement(self):
        spec = scene(objects=[ObjectSpec("square", 6, 1.5)], frame_size=(64, 64), frame_count=80)
        profile = np.ones(80)
        profile[30:50] = 3.0
        fast = ss.object_tracks(spec, 2, {0: profile})[0]
        step = np.linalg.norm(np.diff(fast, axis=0), axis=1)
        # the free-path step length is exact away from wall contacts
        lo, hi = 3.0, 61.0
        def free(ts, reach):
            return [t for t in ts if np.all((fast[t - 1:t + 1] > lo + reach) & (fast[t - 1:t + 1] < hi - reach))]

        inside, before = free(range(30, 50), 4.5), free(range(1, 30), 1.5)
        assert inside and before
        np.testing.assert_allclose(step[np.array(inside) - 1], 3 * 1.5, atol=1e-9)
        np.testing.assert_allclose(step[np.array(before) - 1], 1.5, atol=1e-9)

    def test_unseen_shape_differs_from_scene_shapes(self):
        clip = ss.generate_scene(scene(), 5)
        out = ss.inject_anomaly(clip, AnomalySpec("unseen-shape", 10, 12), seed=0)
        assert out.anomalies[-1].type == "unseen-shape"
        assert out.frames[10].tobytes() != clip.frames[10].tobytes()

    @pytest.mark.parametrize("start,end", [(-1, 5), (5, 5), (50, 61)])
    def test_interval_out_of_range(self, start, end):
        clip = ss.generate_scene(scene(), 0)
        with pytest.raises(ConfigError):
            ss.inject_anomaly(clip, AnomalySpec("teleport", start, end))


class TestPairs:
    def test_counts_and_indexing(self):
        frames = np.arange(10 * 2 * 2 * 2, dtype=np.float32).reshape(10, 2, 2, 2)
        x, y, idx = ss.build_pairs(frames, 4)
        assert len(x) == 6 and x.shape[1] == 8
        assert idx[0] == 4
        np.testing.assert_array_equal(y[0], frames[4])
        for p in range(6):
            for t in range(4):
                np.testing.assert_array_equal(x[p, 2 * t : 2 * t + 2], frames[p + t])

    def test_too_short(self):
        with pytest.raises(DataError):
            ss.build_pairs(np.zeros((4, 1, 2, 2)), 4)


class TestContainer:
    def test_round_trip(self, tmp_path):
        manifest, clips = ss.default_benchmark(seed=1, frame_size=(16, 16), frame_count=80, n_meta=2, n_target=1,
                                               adapt_prefix=20)
        ss.write_dataset(manifest, clips, tmp_path)
        back_manifest, back = ss.read_dataset(tmp_path)
        assert back_manifest.to_dict() == manifest.to_dict()
        for name, clip in clips.items():
            assert back[name].frames.tobytes() == clip.frames.tobytes()
            np.testing.assert_array_equal(back[name].labels, clip.labels)

    def test_float64_round_trip(self):
        frames = np.random.default_rng(0).uniform(-1, 1, (3, 2, 4, 4))
        assert ss.decode_frames(ss.encode_frames(frames)).tobytes() == frames.tobytes()

    @pytest.mark.parametrize("cut", [0, 5, 15, 16, 40])
    def test_truncation(self, cut):
        buf = ss.encode_frames(np.zeros((2, 1, 4, 4), np.float32))
        with pytest.raises(FormatError) as info:
            ss.decode_frames(buf[:cut])
        assert info.value.offset is not None

    def test_corrupt_header_fields(self):
        buf = bytearray(ss.encode_frames(np.zeros((2, 1, 4, 4), np.float32)))
        for pos, val, what in [(0, ord("X"), "magic"), (4, 9, "version"), (15, 7, "dtype")]:
            bad = bytearray(buf)
            bad[pos] = val
            with pytest.raises(FormatError, match=what):
                ss.decode_frames(bytes(bad))

    def test_random_corruption_never_crashes(self):
        buf = ss.encode_frames(np.zeros((2, 1, 4, 4), np.float32))
        rng = np.random.default_rng(0)
        for _ in range(200):
            bad = bytearray(buf[: rng.integers(0, len(buf) + 1)])
            if bad:
                bad[rng.integers(0, min(len(bad), 16))] = rng.integers(0, 256)
            try:
                ss.decode_frames(bytes(bad))
            except FormatError:
                pass

    def test_meta_train_clip_must_be_normal(self, tmp_path):
        manifest, clips = ss.default_benchmark(seed=0, frame_size=(16, 16), frame_count=60, n_meta=1, n_target=1,
                                               adapt_prefix=10)
        clips["meta00_train"].labels[3] = 1
        with pytest.raises(DataError):
            ss.write_dataset(manifest, clips, tmp_path)

    def test_bad_label_csv(self, tmp_path):
        p = tmp_path / "l.csv"
        p.write_text("frame_index,label\n0,0\n1,2\n")
        with pytest.raises(FormatError):
            ss.read_labels(p)


class TestBenchmark:
    def test_roles_and_labels(self):
        manifest, clips = ss.default_benchmark(seed=0, frame_size=(16, 16), frame_count=120, adapt_prefix=30)
        assert len(manifest.by_role("meta-train")) == 8
        assert len(manifest.by_role("target")) == 3
        for s in manifest.by_role("meta-train"):
            assert not any(clips[c.name].labels.any() for c in s.clips)
        for s in manifest.by_role("target"):
            test = clips[f"{s.scene_id}_test"]
            assert test.labels.any()
            assert not test.labels[:30].any()

    def test_target_shapes_absent_from_meta(self):
        manifest, _ = ss.default_benchmark(seed=2, frame_size=(16, 16), frame_count=60, adapt_prefix=10)
        meta_shapes = {o["shape"] for s in manifest.by_role("meta-train") for o in s.spec["objects"]}
        target_shapes = {o["shape"] for s in manifest.by_role("target") for o in s.spec["objects"]}
        assert meta_shapes.isdisjoint(target_shapes)

    def test_regenerates_from_manifest(self):
        manifest, clips = ss.default_benchmark(seed=3, frame_size=(16, 16), frame_count=60, n_meta=2, n_target=2,
                                               adapt_prefix=10)
        for scene_entry in manifest.scenes:
            for entry in scene_entry.clips:
                again = ss.regenerate(scene_entry, entry)
                assert again.frames.tobytes() == clips[entry.name].frames.tobytes()
                np.testing.assert_array_equal(again.labels, clips[entry.name].labels)

    def test_default_size_under_budget(self):
        manifest, _ = ss.default_benchmark(seed=0, frame_size=(64, 64), frame_count=60, adapt_prefix=10)
        for entry in manifest.scenes:
            entry.spec["frame_count"] = 500  # size depends only on the dims
        assert ss.dataset_bytes(manifest) == 14 * (16 + 500 * 64 * 64 * 4)
        assert ss.dataset_bytes(manifest) < 200 * 2**20
