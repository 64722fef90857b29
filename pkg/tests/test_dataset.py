import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from crossgan.dataset import (AnomalyType, Frame, GroundTruth, SyntheticSpec, VideoSequence,
                              agent_size, dataset_fingerprint, generate_synthetic_corpus,
                              load_test_video, load_ucsd_layout, pair_frames, write_ucsd_layout)
from crossgan.errors import ConfigurationError, DegenerateVideoError, ShapeError


def _write_video(d, n, h=12, w=10, suffix=".tif", names=None):
    d.mkdir(parents=True)
    for t in range(n):
        name = names[t] if names else f"{t + 1:03d}{suffix}"
        Image.fromarray(np.full((h, w, 3), t % 256, np.uint8)).save(d / name)


def _video(n, h=16, w=16, vid="v"):
    return VideoSequence([Frame(np.zeros((h, w, 3), np.uint8), t, vid) for t in range(n)])


def test_ped1_style_tree_counts(tmp_path):
    for i in range(34):
        _write_video(tmp_path / "Train" / f"Train{i + 1:03d}", 2)
    for i in range(16):
        _write_video(tmp_path / "Test" / f"Test{i + 1:03d}", 2)
    split = load_ucsd_layout(tmp_path)
    assert len(split.train) == 34
    assert len(split.test) == 16
    assert split.train[0].video_id == "Train001"
    assert all(v.ground_truth_missing for v in split.test)


def test_frame_order_is_numeric(tmp_path):
    names = [f"{t + 1}.png" for t in range(200)]
    _write_video(tmp_path / "Train" / "Train001", 200, suffix=".png", names=names)
    (tmp_path / "Test").mkdir()
    v = load_ucsd_layout(tmp_path).train[0]
    assert len(v) == 200
    assert [f.index for f in v.frames] == list(range(200))
    # pixel value encodes the write order, so 10.png must land at index 9
    assert [int(f.pixels[0, 0, 0]) for f in v.frames] == [t % 256 for t in range(200)]


def test_empty_train_and_missing_dirs(tmp_path):
    (tmp_path / "Train").mkdir()
    (tmp_path / "Test").mkdir()
    with pytest.raises(ConfigurationError):
        load_ucsd_layout(tmp_path)
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_ucsd_layout(tmp_path / "nope")
    with pytest.raises(ConfigurationError):
        load_ucsd_layout(tmp_path / "Train")


def test_masks_and_labels_attach(tmp_path):
    _write_video(tmp_path / "Train" / "Train001", 3)
    _write_video(tmp_path / "Test" / "Test001", 3)
    gt = tmp_path / "Test" / "Test001_gt"
    gt.mkdir()
    for t in range(3):
        m = np.zeros((12, 10), np.uint8)
        if t == 1:
            m[2:5, 3:6] = 255
        Image.fromarray(m).save(gt / f"frame{t + 1:03d}.bmp")
    v = load_ucsd_layout(tmp_path).test[0]
    assert v.ground_truth.frame_labels.tolist() == [False, True, False]
    assert v.ground_truth.mask(1).sum() == 9
    assert not v.ground_truth_missing


def test_label_file_wins_and_validates(tmp_path):
    _write_video(tmp_path / "Test" / "Test001", 4)
    (tmp_path / "Test" / "Test001_labels.txt").write_text("0\n1\n1\n0\n")
    v = load_test_video(tmp_path / "Test" / "Test001")
    assert v.ground_truth.frame_labels.tolist() == [False, True, True, False]
    (tmp_path / "Test" / "Test001_labels.txt").write_text("0\n1\n")
    with pytest.raises(ConfigurationError):
        load_test_video(tmp_path / "Test" / "Test001")
    (tmp_path / "Test" / "Test001_labels.txt").write_text("0\nx\n1\n0\n")
    with pytest.raises(ConfigurationError):
        load_test_video(tmp_path / "Test" / "Test001")


def test_ground_truth_rejects_mask_on_normal_frame():
    m = np.zeros((8, 8), bool)
    m[0, 0] = True
    with pytest.raises(ConfigurationError):
        GroundTruth([False], [m])


def test_frame_validation():
    with pytest.raises(ShapeError):
        Frame(np.zeros((8, 8), np.uint8), 0, "v")
    with pytest.raises(ShapeError):
        Frame(np.zeros((4, 8, 3), np.uint8), 0, "v")
    with pytest.raises(ShapeError):
        Frame(np.zeros((8, 8, 3), np.float32), 0, "v")


def test_pair_frames():
    assert len(pair_frames(_video(5))) == 4
    a, b = pair_frames(_video(2))[0]
    assert (a.index, b.index) == (0, 1)
    with pytest.raises(DegenerateVideoError):
        pair_frames(_video(1))


# --------------------------------------------------------------------------
# synthetic corpus

SMALL = dict(resolution=(32, 32), n_train_videos=2, n_test_videos=3, frames_per_video=20)


def test_synthetic_is_deterministic():
    a = generate_synthetic_corpus(SyntheticSpec(seed=7, **SMALL))
    b = generate_synthetic_corpus(SyntheticSpec(seed=7, **SMALL))
    c = generate_synthetic_corpus(SyntheticSpec(seed=8, **SMALL))
    for va, vb in zip(a.train + a.test, b.train + b.test):
        assert np.array_equal(va.array(), vb.array())
    assert dataset_fingerprint(a) == dataset_fingerprint(b)
    assert dataset_fingerprint(a) != dataset_fingerprint(c)


def test_synthetic_shapes_and_splits():
    spec = SyntheticSpec(seed=1, **SMALL)
    split = generate_synthetic_corpus(spec)
    assert len(split.train) == 2 and len(split.test) == 3
    for v in split.train:
        assert len(v) == 20 and v.source_resolution == (32, 32)
        assert not v.has_abnormal
    for v in split.test:
        assert v.has_abnormal
        labels = v.ground_truth.frame_labels
        assert not labels[: 20 // 3].any()


def test_no_test_videos():
    split = generate_synthetic_corpus(SyntheticSpec(seed=0, **{**SMALL, "n_test_videos": 0}))
    assert split.test == []


def test_invalid_spec():
    with pytest.raises(ConfigurationError):
        SyntheticSpec.from_dict({"frames_per_video": 1})
    with pytest.raises(ConfigurationError):
        SyntheticSpec.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        SyntheticSpec.from_dict({"anomaly_type": "teleport"})
    with pytest.raises(ConfigurationError):
        SyntheticSpec.from_dict({"anomaly_speed_multiplier": 1.0})


def _covered(start, length, n):
    # pixel j is touched by [start, start + length) iff the overlap has positive length
    j = np.arange(n)
    return (j + 1 > start) & (j < start + length)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fast_mover_trajectory_oracle(seed):
    spec = SyntheticSpec(seed=seed, **SMALL)
    H, W = spec.resolution
    ah, aw = agent_size(spec.resolution)
    for v in generate_synthetic_corpus(spec).test:
        a = v.metadata["anomaly"]
        assert a["type"] == "fast_mover"
        assert abs(a["velocity"]) == spec.normal_speed * spec.anomaly_speed_multiplier
        assert (a["height"], a["width"]) == (ah, aw)
        for t in range(len(v)):
            mask = v.ground_truth.mask(t)
            if t < a["t_start"]:
                assert not mask.any()
                continue
            x = a["x_start"] + a["velocity"] * (t - a["t_start"])
            expected = np.outer(_covered(a["y"], ah, H), _covered(x, aw, W))
            assert np.array_equal(mask, expected), (v.video_id, t)
            assert v.ground_truth.frame_labels[t] == expected.any()


def test_fast_mover_moves_three_pixels_per_frame():
    spec = SyntheticSpec(seed=4, **{**SMALL, "resolution": (64, 64), "frames_per_video": 30})
    v = generate_synthetic_corpus(spec).test[0]
    a = v.metadata["anomaly"]
    _, aw = agent_size(spec.resolution)
    cols = []
    for t in range(a["t_start"], len(v)):
        m = v.ground_truth.mask(t)
        xs = np.nonzero(m.any(axis=0))[0]
        if xs.size and xs.min() > 0 and xs.max() < 63:
            cols.append((t, xs.min()))
    steps = {np.sign(a["velocity"]) * (c1 - c0) / (t1 - t0) for (t0, c0), (t1, c1) in zip(cols, cols[1:])}
    assert steps == {3.0}


@pytest.mark.parametrize("kind", ["wrong_direction", "large_object"])
def test_other_anomaly_types(kind):
    spec = SyntheticSpec(seed=0, anomaly_type=kind, **SMALL)
    ah, aw = agent_size(spec.resolution)
    for v in generate_synthetic_corpus(spec).test:
        a = v.metadata["anomaly"]
        assert v.has_abnormal
        if kind == "large_object":
            assert (a["height"], a["width"]) == (2 * ah, 3 * aw)
            assert abs(a["velocity"]) == spec.normal_speed
        else:
            assert abs(a["velocity"]) == spec.normal_speed


def test_write_and_reload_round_trip(tmp_path):
    spec = SyntheticSpec(seed=5, **SMALL)
    split = generate_synthetic_corpus(spec)
    write_ucsd_layout(split, tmp_path, spec)
    back = load_ucsd_layout(tmp_path)
    for a, b in zip(split.train + split.test, back.train + back.test):
        assert a.video_id == b.video_id
        assert np.array_equal(a.array(), b.array())
    for a, b in zip(split.test, back.test):
        assert np.array_equal(a.ground_truth.frame_labels, b.ground_truth.frame_labels)
        for t in range(len(a)):
            assert np.array_equal(a.ground_truth.mask(t), b.ground_truth.mask(t))
    side = json.loads((tmp_path / "spec.json").read_text())
    assert SyntheticSpec.from_dict(side["synthetic_spec"]) == spec
    assert side["anomalies"]["Test001"]["type"] == AnomalyType.FAST_MOVER.value


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_labels_match_masks(seed):
    spec = SyntheticSpec(resolution=(16, 16), n_train_videos=1, n_test_videos=1,
                         frames_per_video=12, agent_count=2, seed=seed)
    split = generate_synthetic_corpus(spec)
    gt = split.test[0].ground_truth
    assert [bool(gt.mask(t).any()) for t in range(12)] == gt.frame_labels.tolist()
    assert not split.train[0].has_abnormal
