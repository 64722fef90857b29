import csv

import numpy as np
import pytest
import torch

from crossgan import checkpoint as ckpt_io
from crossgan.dataset import DatasetSplit, Frame, GroundTruth, SyntheticSpec, VideoSequence, generate_synthetic_corpus
from crossgan.errors import ConfigurationError, TrainingDivergenceError
from crossgan.gan import Direction
from crossgan.optflow import DEFAULT_RANGE, FlowCache, FlowConfig
from crossgan.trainer import (Checkpoint, TrainConfig, TrainState, TrainingSet, build_training_set,
                              checkpoint_path, flow_image_to_tensor, flow_to_image, frame_to_tensor,
                              latest_checkpoint, train_network, train_step)

FAST_FLOW = FlowConfig(levels=2, warps=1, outer_iters=1, sor_iters=5)


def _toy_cfg(**kw):
    base = dict(direction="F2O", epochs=2, resolution=16, ngf=4, ndf=4, disc_layers=1, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _toy_set(n=4, direction=Direction.F2O, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, 16, 16, generator=g) * 2 - 1
    y = torch.tanh(x.flip(1) * 1.5)
    return TrainingSet(x, y, direction, DEFAULT_RANGE)


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


@pytest.fixture(scope="module")
def small_split():
    spec = SyntheticSpec(resolution=(32, 32), n_train_videos=1, n_test_videos=1,
                         frames_per_video=11, agent_count=3, seed=2)
    return generate_synthetic_corpus(spec)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.momentum, cfg.resolution) == (10, 1, 0.5, 256)
    assert cfg.optimizer == "sgd" and cfg.lr == 2e-4 and cfg.lambda_l1 == 100.0


def test_config_round_trip_and_validation():
    cfg = _toy_cfg(direction="O2F")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == TrainConfig.from_dict(cfg.to_dict()).digest()
    for bad in ({"epochs": 0}, {"momentum": 1.0}, {"optimizer": "rmsprop"}, {"lr": -1}):
        with pytest.raises(ConfigurationError):
            _toy_cfg(**bad).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"nope": 1})


def test_training_set_pairs(small_split):
    cache = FlowCache(cfg=FAST_FLOW)
    ts = build_training_set(small_split, "F2O", 16, cache)
    assert len(ts) == 10
    video = small_split.train[0]
    assert torch.equal(ts.x[3], frame_to_tensor(video[3], 16))
    flow = flow_image_to_tensor(flow_to_image(cache.get(video, 3), 16, ts.flow_range))
    assert torch.equal(ts.y[3], flow)
    rev = build_training_set(small_split, "O2F", 16, cache, ts.flow_range)
    assert torch.equal(rev.x, ts.y) and torch.equal(rev.y, ts.x)
    assert ts.x.min() >= -1 and ts.x.max() <= 1


def test_epoch_order_is_seeded():
    ts = _toy_set(10)
    assert np.array_equal(ts.epoch_order(1, 0), ts.epoch_order(1, 0))
    assert not np.array_equal(ts.epoch_order(1, 0), ts.epoch_order(2, 0))
    assert sorted(ts.epoch_order(3, 0)) == list(range(10))


def test_training_set_rejects_abnormal_and_empty(small_split):
    bad = small_split.test[0]
    with pytest.raises(ConfigurationError, match="abnormal"):
        build_training_set(DatasetSplit([bad], []), "F2O", 16, FlowCache(cfg=FAST_FLOW))
    with pytest.raises(ConfigurationError):
        build_training_set(DatasetSplit([], []), "F2O", 16)


def test_l1_decreases_over_windows():
    cfg = _toy_cfg(dropout=0.0, lr=2e-3)
    ts = _toy_set(1)
    state = TrainState.fresh(cfg, DEFAULT_RANGE)
    l1 = [train_step(state, ts.x[0], ts.y[0])["loss_L1"] for _ in range(50)]
    assert all(l1[k + 10] < l1[k] for k in range(40))


def test_zero_lr_is_a_no_op():
    cfg = _toy_cfg(lr=0.0)
    ts = _toy_set(2)
    state = TrainState.fresh(cfg, DEFAULT_RANGE)
    g0, d0 = _params(state.gen), _params(state.disc)
    for i in range(3):
        train_step(state, ts.x[i % 2], ts.y[i % 2])
    assert all(torch.equal(a, b) for a, b in zip(g0, _params(state.gen)))
    assert all(torch.equal(a, b) for a, b in zip(d0, _params(state.disc)))


def test_same_seed_same_bytes():
    ts = _toy_set(3)
    a = train_network(None, _toy_cfg(), training_set=ts)
    b = train_network(None, _toy_cfg(), training_set=ts)
    c = train_network(None, _toy_cfg(seed=4), training_set=ts)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != c.to_bytes()


def test_two_frame_video_one_step():
    a = np.random.default_rng(0).integers(0, 255, (16, 16, 3), dtype=np.uint8)
    video = VideoSequence([Frame(a, 0, "v"), Frame(np.roll(a, 1, axis=1), 1, "v")])
    ck = train_network(DatasetSplit([video], []), _toy_cfg(epochs=1), cache=FlowCache(cfg=FAST_FLOW))
    assert ck.step == 1 and ck.epoch == 1


def test_checkpoints_and_metrics(tmp_path):
    ts = _toy_set(2)
    ck = train_network(None, _toy_cfg(epochs=10), out_dir=tmp_path, training_set=ts)
    files = sorted(p.name for p in tmp_path.glob("F2O_epoch*.ckpt"))
    assert files == [f"F2O_epoch{e:03d}.ckpt" for e in range(1, 11)]
    assert latest_checkpoint(tmp_path, "F2O") == checkpoint_path(tmp_path, "F2O", 10)
    rows = list(csv.reader(open(tmp_path / "metrics_F2O.csv")))
    assert rows[0] == ["epoch", "step", "loss_D", "loss_G_adv", "loss_L1"]
    assert len(rows) == 11 and rows[-1][:2] == ["10", "20"]
    loaded = Checkpoint.load(checkpoint_path(tmp_path, "F2O", 10))
    assert loaded.to_bytes() == ck.to_bytes()
    assert loaded.direction is Direction.F2O and loaded.config == ck.config
    assert not list(tmp_path.glob(".*.partial"))


def test_resume_matches_uninterrupted(tmp_path):
    ts = _toy_set(3)
    cfg = _toy_cfg(epochs=5)
    full = train_network(None, cfg, training_set=ts)
    train_network(None, cfg, out_dir=tmp_path, training_set=ts, stop_after=3)
    resume = Checkpoint.load(latest_checkpoint(tmp_path, "F2O"))
    assert resume.epoch == 3
    resumed = train_network(None, cfg, out_dir=tmp_path, training_set=ts, resume=resume)
    assert resumed.to_bytes() == full.to_bytes()


def test_resume_may_extend_epochs(tmp_path):
    ts = _toy_set(3)
    full = train_network(None, _toy_cfg(epochs=4), training_set=ts)
    short = train_network(None, _toy_cfg(epochs=2), training_set=ts)
    extended = train_network(None, _toy_cfg(epochs=4), training_set=ts, resume=short)
    assert extended.epoch == 4
    for a, b in zip(extended.to_state().gen.parameters(), full.to_state().gen.parameters()):
        assert torch.equal(a, b)


def test_resume_rejects_other_config(tmp_path):
    ts = _toy_set(2)
    ck = train_network(None, _toy_cfg(epochs=1), training_set=ts)
    with pytest.raises(ConfigurationError):
        train_network(None, _toy_cfg(epochs=2, lr=1e-3), training_set=ts, resume=ck)


def test_divergence_dumps_state(tmp_path):
    ts = _toy_set(2)
    with pytest.raises(TrainingDivergenceError) as err:
        train_network(None, _toy_cfg(lambda_l1=float("nan")), out_dir=tmp_path, training_set=ts)
    assert err.value.checkpoint_path is not None and err.value.checkpoint_path.is_file()


def test_build_generator_reproduces_outputs():
    ts = _toy_set(2)
    ck = train_network(None, _toy_cfg(epochs=1), training_set=ts)
    g = ck.build_generator()
    state = ck.to_state()
    with torch.no_grad():
        assert torch.equal(g(ts.x[:1]), state.gen(ts.x[:1]))


def test_checkpoint_container(tmp_path):
    payload = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": [1, "x", {"c": torch.ones(2)}],
               "d": {3: torch.zeros(1, dtype=torch.int64)}}
    data = ckpt_io.encode(payload)
    assert data == ckpt_io.encode(payload)
    back = ckpt_io.decode(data)
    assert torch.equal(back["a"], payload["a"]) and back["b"][1] == "x"
    assert torch.equal(back["d"][3], payload["d"][3])
    with pytest.raises(ConfigurationError):
        ckpt_io.decode(b"XXXX" + data[4:])
    with pytest.raises(ConfigurationError):
        ckpt_io.load(tmp_path / "missing.ckpt")


def test_atomic_write_cleans_up(tmp_path, monkeypatch):
    def boom(fd):
        raise OSError("disk full")
    monkeypatch.setattr(ckpt_io.os, "fsync", boom)
    target = tmp_path / "x.ckpt"
    with pytest.raises(OSError):
        ckpt_io.save(target, {"a": torch.ones(3)})
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
