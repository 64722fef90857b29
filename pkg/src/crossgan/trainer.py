"""Training of the frame->flow and flow->frame networks on normal videos only."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import cv2
import numpy as np
import torch

from . import checkpoint as ckpt_io
from .dataset import DatasetSplit, pair_frames
from .errors import ConfigurationError, TrainingDivergenceError
from .gan import (Direction, Generator, NoiseSource, PatchDiscriminator, discriminator_loss,
                  generator_adversarial_loss, init_weights, l1_loss)
from .optflow import FlowCache, FlowField, FlowImage, FlowRange, encode_flow

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "step", "loss_D", "loss_G_adv", "loss_L1")


@dataclass
class TrainConfig:
    direction: Direction = Direction.F2O
    epochs: int = 10
    batch_size: int = 1
    optimizer: str = "sgd"  # "sgd" (momentum SGD) or "adam" (beta1 = momentum)
    momentum: float = 0.5
    lr: float = 2e-4
    resolution: int = 256
    seed: int = 0
    lambda_l1: float = 100.0
    ngf: int = 64
    ndf: int = 64
    disc_layers: int = 3
    dropout: float = 0.5
    deterministic: bool = True

    def __post_init__(self):
        self.direction = Direction.parse(self.direction)

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["direction"] = self.direction.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------
# network-input preparation (shared with the detector)

def frame_to_tensor(frame, resolution: int) -> torch.Tensor:
    """uint8 HxWx3 frame -> float32 3xRxR tensor in [-1, 1], bilinear resize."""
    px = getattr(frame, "pixels", frame)
    img = cv2.resize(px, (resolution, resolution), interpolation=cv2.INTER_LINEAR)
    arr = img.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def flow_to_image(flow: FlowField, resolution: int, mapping: FlowRange) -> FlowImage:
    return encode_flow(flow.resized((resolution, resolution)), mapping)


def flow_image_to_tensor(img: FlowImage) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.channels.transpose(2, 0, 1)))


def fit_flow_range(split: DatasetSplit, resolution: int, cache: FlowCache) -> FlowRange:
    return FlowRange.fit(cache.get(v, t).resized((resolution, resolution))
                         for v in split.train for t in range(len(v) - 1))


@dataclass
class TrainingPair:
    x: torch.Tensor
    y: torch.Tensor


@dataclass
class TrainingSet:
    """All (condition, target) pairs of the normal training videos, at network resolution."""

    x: torch.Tensor
    y: torch.Tensor
    direction: Direction
    flow_range: FlowRange

    def __len__(self):
        return self.x.shape[0]

    def epoch_order(self, epoch: int, seed: int) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(len(self))

    def epoch(self, epoch: int, seed: int) -> Iterator[TrainingPair]:
        for i in self.epoch_order(epoch, seed):
            yield TrainingPair(self.x[i], self.y[i])

    def batches(self, epoch: int, seed: int, batch_size: int):
        order = self.epoch_order(epoch, seed)
        for s in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[s:s + batch_size])
            yield self.x[idx], self.y[idx]


def build_training_set(split: DatasetSplit, direction, resolution: int = 256,
                       cache: Optional[FlowCache] = None,
                       flow_range: Optional[FlowRange] = None) -> TrainingSet:
    direction = Direction.parse(direction)
    if not split.train:
        raise ConfigurationError("training split is empty")
    for video in split.train:
        if video.has_abnormal:
            raise ConfigurationError(
                f"training video {video.video_id} contains abnormal frames; "
                "training uses normal videos only")
    cache = cache or FlowCache()
    if flow_range is None:
        flow_range = fit_flow_range(split, resolution, cache)
    frames, flows = [], []
    for video in split.train:
        for t, (a, _) in enumerate(pair_frames(video)):
            frames.append(frame_to_tensor(a, resolution))
            flows.append(flow_image_to_tensor(flow_to_image(cache.get(video, t), resolution, flow_range)))
    f, o = torch.stack(frames), torch.stack(flows)
    x, y = (f, o) if direction is Direction.F2O else (o, f)
    return TrainingSet(x, y, direction, flow_range)


# --------------------------------------------------------------------------
# training state

def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.momentum, 0.999))


@dataclass
class TrainState:
    gen: Generator
    disc: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    noise: NoiseSource
    config: TrainConfig
    flow_range: FlowRange
    epoch: int = 0
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig, flow_range: FlowRange) -> "TrainState":
        init_gen = torch.Generator().manual_seed(cfg.seed)
        gen = Generator(cfg.resolution, cfg.direction, ngf=cfg.ngf, dropout=cfg.dropout)
        disc = PatchDiscriminator(ndf=cfg.ndf, n_layers=cfg.disc_layers)
        init_weights(gen, init_gen)
        init_weights(disc, init_gen)
        return cls(gen, disc, make_optimizer(gen.parameters(), cfg), make_optimizer(disc.parameters(), cfg),
                   NoiseSource(cfg.dropout > 0, cfg.seed), cfg, flow_range)

    def to_checkpoint(self) -> "Checkpoint":
        return Checkpoint(
            direction=self.config.direction, resolution=self.config.resolution,
            generator=copy.deepcopy(self.gen.state_dict()),
            discriminator=copy.deepcopy(self.disc.state_dict()),
            opt_g=copy.deepcopy(self.opt_g.state_dict()), opt_d=copy.deepcopy(self.opt_d.state_dict()),
            epoch=self.epoch, step=self.step, history=list(self.history),
            config=self.config, flow_range=self.flow_range,
            topology={"generator": self.gen.descriptor(), "discriminator": self.disc.descriptor()},
        )


@dataclass
class Checkpoint:
    direction: Direction
    resolution: int
    generator: dict
    discriminator: dict
    opt_g: dict
    opt_d: dict
    epoch: int
    step: int
    history: list
    config: TrainConfig
    flow_range: FlowRange
    topology: dict

    def to_payload(self) -> dict:
        return {
            "format": "crossgan-checkpoint",
            "direction": self.direction.value,
            "resolution": self.resolution,
            "topology": self.topology,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "flow_range": self.flow_range.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "history": self.history,
            "generator": self.generator,
            "discriminator": self.discriminator,
            "opt_g": self.opt_g,
            "opt_d": self.opt_d,
        }

    def to_bytes(self) -> bytes:
        return ckpt_io.encode(self.to_payload())

    def save(self, path):
        ckpt_io.atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = ckpt_io.load(path)
        if p.get("format") != "crossgan-checkpoint":
            raise ConfigurationError(f"{path} is not a crossgan checkpoint")
        return cls(
            direction=Direction.parse(p["direction"]), resolution=p["resolution"],
            generator=p["generator"], discriminator=p["discriminator"],
            opt_g=p["opt_g"], opt_d=p["opt_d"], epoch=p["epoch"], step=p["step"],
            history=p["history"], config=TrainConfig.from_dict(p["config"]),
            flow_range=FlowRange.from_dict(p["flow_range"]), topology=p["topology"],
        )

    def build_generator(self) -> Generator:
        cfg = self.config
        g = Generator(cfg.resolution, cfg.direction, ngf=cfg.ngf, dropout=cfg.dropout)
        g.load_state_dict(self.generator)
        return g

    def to_state(self) -> TrainState:
        state = TrainState.fresh(self.config, self.flow_range)
        state.gen.load_state_dict(self.generator)
        state.disc.load_state_dict(self.discriminator)
        state.opt_g.load_state_dict(self.opt_g)
        state.opt_d.load_state_dict(self.opt_d)
        state.epoch, state.step, state.history = self.epoch, self.step, list(self.history)
        return state


# --------------------------------------------------------------------------

def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> Dict[str, float]:
    """One discriminator update followed by one generator update.

    Raises :class:`TrainingDivergenceError` when a loss is not finite, before
    the update that loss would drive.
    """
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    gen, disc, cfg = state.gen, state.disc, state.config
    gen.train()
    disc.train()

    fake = gen(x, state.noise)
    loss_d = discriminator_loss(disc(x, y), disc(x, fake.detach()))
    if not torch.isfinite(loss_d):
        raise TrainingDivergenceError(f"non-finite discriminator loss at step {state.step}")
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()

    loss_adv = generator_adversarial_loss(disc(x, fake))
    loss_l1 = l1_loss(y, fake)
    loss_g = loss_adv + cfg.lambda_l1 * loss_l1
    if not torch.isfinite(loss_g):
        raise TrainingDivergenceError(f"non-finite generator loss at step {state.step}")
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()

    state.step += 1
    return {"loss_D": loss_d.item(), "loss_G_adv": loss_adv.item(), "loss_L1": loss_l1.item()}


@contextmanager
def deterministic_mode(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled or prev)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def checkpoint_path(out_dir, direction, epoch: int) -> Path:
    return Path(out_dir) / f"{Direction.parse(direction).value}_epoch{epoch:03d}.ckpt"


def latest_checkpoint(out_dir, direction) -> Optional[Path]:
    found = sorted(Path(out_dir).glob(f"{Direction.parse(direction).value}_epoch*.ckpt"))
    return found[-1] if found else None


def _append_metrics(path: Path, row: Dict[str, float]):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_COLUMNS)
        writer.writerow([row["epoch"], row["step"]] +
                        [f"{row[k]:.8g}" for k in METRIC_COLUMNS[2:]])


def train_network(split: Optional[DatasetSplit], cfg: TrainConfig, out_dir=None,
                  cache: Optional[FlowCache] = None, training_set: Optional[TrainingSet] = None,
                  resume: Optional[Checkpoint] = None, stop_after: Optional[int] = None,
                  progress=None) -> Checkpoint:
    """Train one direction for ``cfg.epochs`` epochs and return the final checkpoint.

    A checkpoint is written at the end of every epoch when ``out_dir`` is
    given, and per-epoch mean losses are appended to ``metrics_<dir>.csv``.
    ``resume`` continues from a stored epoch; ``stop_after`` ends the run after
    that epoch (used to emulate an interruption).
    """
    cfg.validate()
    if training_set is None:
        training_set = build_training_set(split, cfg.direction, cfg.resolution, cache)
    if training_set.direction is not cfg.direction:
        raise ConfigurationError("training set direction does not match config")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        # nothing in the schedule depends on the total, so a resume may extend it
        if replace(resume.config, epochs=cfg.epochs).digest() != cfg.digest():
            raise ConfigurationError("resume checkpoint was trained with a different config")
        if resume.epoch > cfg.epochs:
            raise ConfigurationError(f"checkpoint is at epoch {resume.epoch}, past epochs={cfg.epochs}")
        state = resume.to_state()
    else:
        state = TrainState.fresh(cfg, training_set.flow_range)

    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    with deterministic_mode(cfg.deterministic):
        for epoch in range(state.epoch + 1, last + 1):
            state.noise.reseed(_epoch_seed(cfg.seed, epoch))
            sums = {"loss_D": 0.0, "loss_G_adv": 0.0, "loss_L1": 0.0}
            n = 0
            for x, y in training_set.batches(epoch, cfg.seed, cfg.batch_size):
                try:
                    metrics = train_step(state, x, y)
                except TrainingDivergenceError as exc:
                    dump = None
                    if out_dir is not None:
                        dump = out_dir / f"{cfg.direction.value}_diverged.ckpt"
                        state.to_checkpoint().save(dump)
                    raise TrainingDivergenceError(str(exc), dump) from exc
                for k in sums:
                    sums[k] += metrics[k]
                n += 1
                if progress is not None:
                    progress(epoch, state.step, metrics)
            state.epoch = epoch
            row = {"epoch": epoch, "step": state.step, **{k: v / max(n, 1) for k, v in sums.items()}}
            state.history.append(row)
            logger.info("%s epoch %d: D=%.4f G_adv=%.4f L1=%.4f", cfg.direction.arrow, epoch,
                        row["loss_D"], row["loss_G_adv"], row["loss_L1"])
            if out_dir is not None:
                state.to_checkpoint().save(checkpoint_path(out_dir, cfg.direction, epoch))
                _append_metrics(out_dir / f"metrics_{cfg.direction.value}.csv", row)
    return state.to_checkpoint()
