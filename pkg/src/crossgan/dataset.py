"""Video datasets: UCSD-layout ingestion and a synthetic crowd-like corpus.

Frames are kept at source resolution. Resizing to the network size happens
later so that ground-truth masks stay at native resolution for pixel-level
evaluation.

On-disk layout (read and written)::

    <root>/Train/Train001/001.png ...
    <root>/Test/Test001/001.png ...
    <root>/Test/Test001_gt/001.png ...     nonzero pixel = abnormal
    <root>/Test/Test001_labels.txt         one 0/1 line per frame
    <root>/spec.json                       synthetic corpora only
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DegenerateVideoError, ShapeError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".tif", ".tiff", ".png", ".bmp")
MASK_SUFFIXES = (".bmp", ".png", ".tif", ".tiff")


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    index: int
    video_id: str

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"frame must be HxWx3, got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ShapeError(f"frame too small: {px.shape[:2]}")
        if px.dtype != np.uint8:
            raise ShapeError(f"frame pixels must be uint8, got {px.dtype}")
        if self.index < 0:
            raise ValueError("frame index must be nonnegative")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass
class GroundTruth:
    frame_labels: np.ndarray
    pixel_masks: Optional[List[Optional[np.ndarray]]] = None

    def __post_init__(self):
        self.frame_labels = np.asarray(self.frame_labels, dtype=bool)
        if self.pixel_masks is None:
            return
        if len(self.pixel_masks) != len(self.frame_labels):
            raise ConfigurationError("one mask slot per frame is required")
        for t, mask in enumerate(self.pixel_masks):
            if mask is not None and mask.any() and not self.frame_labels[t]:
                raise ConfigurationError(
                    f"frame {t} has a nonempty mask but is labelled normal")

    def mask(self, t: int) -> Optional[np.ndarray]:
        if self.pixel_masks is None:
            return None
        return self.pixel_masks[t]

    @classmethod
    def from_masks(cls, masks: Sequence[Optional[np.ndarray]]) -> "GroundTruth":
        # frame label = mask nonempty
        labels = np.array([m is not None and bool(m.any()) for m in masks])
        return cls(labels, list(masks))


@dataclass
class VideoSequence:
    frames: List[Frame]
    ground_truth: Optional[GroundTruth] = None
    source_resolution: Tuple[int, int] = (0, 0)
    video_id: str = ""
    metadata: dict = field(default_factory=dict)
    # set by the loader for test videos that lack any frame labels
    ground_truth_missing: bool = False

    def __post_init__(self):
        if not self.frames:
            raise DegenerateVideoError("video has no frames")
        if not self.video_id:
            self.video_id = self.frames[0].video_id
        if self.source_resolution == (0, 0):
            self.source_resolution = self.frames[0].shape
        for t, f in enumerate(self.frames):
            if f.index != t:
                raise ConfigurationError(
                    f"{self.video_id}: frame indices must be consecutive from 0")
            if f.shape != tuple(self.source_resolution):
                raise ShapeError(f"{self.video_id}: frame {t} has shape {f.shape}")
        gt = self.ground_truth
        if gt is not None and len(gt.frame_labels) != len(self.frames):
            raise ConfigurationError(
                f"{self.video_id}: {len(gt.frame_labels)} labels for "
                f"{len(self.frames)} frames")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, t):
        return self.frames[t]

    def array(self) -> np.ndarray:
        """All frames stacked as a (T, H, W, 3) uint8 array."""
        return np.stack([f.pixels for f in self.frames])

    @property
    def has_abnormal(self) -> bool:
        return self.ground_truth is not None and bool(self.ground_truth.frame_labels.any())


@dataclass
class DatasetSplit:
    train: List[VideoSequence]
    test: List[VideoSequence]


class AnomalyType(str, Enum):
    FAST_MOVER = "fast_mover"
    WRONG_DIRECTION = "wrong_direction"
    LARGE_OBJECT = "large_object"


@dataclass
class SyntheticSpec:
    resolution: Tuple[int, int] = (64, 64)
    n_train_videos: int = 8
    n_test_videos: int = 4
    frames_per_video: int = 60
    agent_count: int = 6
    normal_speed: float = 1.0
    anomaly_type: AnomalyType = AnomalyType.FAST_MOVER
    anomaly_speed_multiplier: float = 3.0
    seed: int = 0

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.anomaly_type = AnomalyType(self.anomaly_type)

    def validate(self):
        h, w = self.resolution
        if h < 16 or w < 16:
            raise ConfigurationError("synthetic resolution must be at least 16x16")
        if self.frames_per_video < 2:
            raise ConfigurationError("frames_per_video must be >= 2")
        if self.n_train_videos < 0 or self.n_test_videos < 0 or self.agent_count < 0:
            raise ConfigurationError("counts must be nonnegative")
        if not self.normal_speed > 0:
            raise ConfigurationError("normal_speed must be > 0")
        if self.anomaly_type is AnomalyType.FAST_MOVER and not self.anomaly_speed_multiplier > 1:
            raise ConfigurationError("fast_mover needs anomaly_speed_multiplier > 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["anomaly_type"] = self.anomaly_type.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        try:
            spec = cls(**known)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid synthetic spec: {exc}") from exc
        spec.validate()
        return spec


def pair_frames(video: VideoSequence) -> List[Tuple[Frame, Frame]]:
    if len(video) < 2:
        raise DegenerateVideoError(
            f"{video.video_id}: need at least 2 frames to form a pair, got {len(video)}")
    return [(video.frames[t], video.frames[t + 1]) for t in range(len(video) - 1)]


# --------------------------------------------------------------------------
# UCSD layout

def _numeric_key(path: Path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else -1, path.name)


def _list_images(directory: Path, suffixes) -> List[Path]:
    files = [p for p in directory.iterdir() if p.suffix.lower() in suffixes and p.is_file()]
    return sorted(files, key=_numeric_key)


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def _load_video(directory: Path) -> VideoSequence:
    files = _list_images(directory, IMAGE_SUFFIXES)
    if not files:
        raise ConfigurationError(f"no frames found in {directory}")
    vid = directory.name
    frames = [Frame(_read_rgb(p), t, vid) for t, p in enumerate(files)]
    return VideoSequence(frames, video_id=vid)


def _read_labels(path: Path) -> np.ndarray:
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if any(ln not in ("0", "1") for ln in lines):
        raise ConfigurationError(f"{path}: labels must be 0/1 lines")
    return np.array([ln == "1" for ln in lines])


def _video_dirs(parent: Path) -> List[Path]:
    dirs = [d for d in parent.iterdir()
            if d.is_dir() and not d.name.endswith("_gt") and not d.name.startswith(".")]
    return sorted(dirs, key=lambda d: d.name)


def load_ucsd_layout(root) -> DatasetSplit:
    """Read a UCSD-style tree into a :class:`DatasetSplit`.

    Videos are ordered by directory name and frames by the number in their
    filename. Test videos with neither a label file nor masks load fine but
    carry ``ground_truth_missing=True``; evaluation refuses them later.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root does not exist: {root}")
    train_dir, test_dir = root / "Train", root / "Test"
    for d in (train_dir, test_dir):
        if not d.is_dir():
            raise ConfigurationError(f"missing directory: {d}")
    train_dirs = _video_dirs(train_dir)
    if not train_dirs:
        raise ConfigurationError(f"no training videos under {train_dir}")

    train = [_load_video(d) for d in train_dirs]
    test = [load_test_video(d) for d in _video_dirs(test_dir)]
    return DatasetSplit(train, test)


def load_test_video(directory) -> VideoSequence:
    """One test video plus its sibling ``<id>_labels.txt`` and ``<id>_gt/`` masks."""
    d = Path(directory)
    if not d.is_dir():
        raise ConfigurationError(f"video directory does not exist: {d}")
    video = _load_video(d)
    labels = None
    label_file = d.parent / f"{d.name}_labels.txt"
    if label_file.is_file():
        labels = _read_labels(label_file)
    masks = None
    gt_dir = d.parent / f"{d.name}_gt"
    if gt_dir.is_dir():
        masks = [None] * len(video)
        for t, p in enumerate(_list_images(gt_dir, MASK_SUFFIXES)):
            if t >= len(video):
                break
            m = _read_mask(p)
            if m.shape != tuple(video.source_resolution):
                raise ShapeError(f"{p}: mask shape {m.shape} != frame shape")
            masks[t] = m
    if labels is not None:
        video.ground_truth = GroundTruth(labels, masks)
    elif masks is not None:
        video.ground_truth = GroundTruth.from_masks(masks)
    else:
        video.ground_truth_missing = True
        logger.warning("test video %s has no frame labels", d.name)
    video.__post_init__()
    return video


def dataset_fingerprint(split: DatasetSplit) -> str:
    """Content hash over video ids and frame pixels; keys on-disk caches."""
    h = hashlib.sha256()
    for part, videos in (("train", split.train), ("test", split.test)):
        for v in videos:
            h.update(f"{part}:{v.video_id}:{len(v)}:{v.source_resolution}".encode())
            for f in v.frames:
                h.update(f.pixels.tobytes())
    return h.hexdigest()[:16]


def _write_png(path: Path, arr: np.ndarray):
    Image.fromarray(arr).save(path, format="PNG")


def write_ucsd_layout(split: DatasetSplit, root, spec: Optional[SyntheticSpec] = None):
    """Write ``split`` as a UCSD-style tree of PNG frames (lossless)."""
    root = Path(root)
    for sub, videos in (("Train", split.train), ("Test", split.test)):
        base = root / sub
        base.mkdir(parents=True, exist_ok=True)
        for video in videos:
            vdir = base / video.video_id
            vdir.mkdir(exist_ok=True)
            for f in video.frames:
                _write_png(vdir / f"{f.index + 1:03d}.png", f.pixels)
            gt = video.ground_truth
            if sub == "Test" and gt is not None:
                lines = "".join("1\n" if lab else "0\n" for lab in gt.frame_labels)
                (base / f"{video.video_id}_labels.txt").write_text(lines)
                if gt.pixel_masks is not None:
                    gdir = base / f"{video.video_id}_gt"
                    gdir.mkdir(exist_ok=True)
                    h, w = video.source_resolution
                    for t, m in enumerate(gt.pixel_masks):
                        m = np.zeros((h, w), bool) if m is None else m
                        _write_png(gdir / f"{t + 1:03d}.png", m.astype(np.uint8) * 255)
    if spec is not None:
        sidecar = {"synthetic_spec": spec.to_dict(),
                   "anomalies": {v.video_id: v.metadata.get("anomaly") for v in split.test}}
        (root / "spec.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# synthetic corpus

def _coverage_1d(start: float, length: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel interval [j, j+1) covered by [start, start+length)."""
    j = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(j + 1, start + length) - np.maximum(j, start), 0.0, 1.0)


def _render_rect(canvas: np.ndarray, y: float, x: float, h: float, w: float, color,
                 phase: float = 0.0):
    """Alpha-composite an anti-aliased, internally shaded rectangle.

    The shading is a smooth pattern fixed to the agent's own coordinates, so
    it travels with the agent. Returns the coverage map.
    """
    H, W, _ = canvas.shape
    cov = np.outer(_coverage_1d(y, h, H), _coverage_1d(x, w, W))
    ly = (np.arange(H) + 0.5 - y) / h
    lx = (np.arange(W) + 0.5 - x) / w
    shade = 1.0 + 0.45 * np.outer(np.cos(np.pi * (2 * ly + phase)), np.sin(np.pi * (1.5 * lx + 0.25)))
    body = shade[..., None] * np.asarray(color, dtype=np.float64)
    canvas *= (1.0 - cov)[..., None]
    canvas += cov[..., None] * body
    return cov


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    noise = rng.normal(size=(h, w))
    fine = ndimage.gaussian_filter(noise, 1.0, mode="wrap")
    coarse = ndimage.gaussian_filter(rng.normal(size=(h, w)), 4.0, mode="wrap")
    base = 150.0 + 40.0 * fine / (fine.std() + 1e-12) + 25.0 * coarse / (coarse.std() + 1e-12)
    tint = np.array([1.0, 0.97, 0.92])
    return np.clip(base[..., None] * tint, 0, 255)


@dataclass
class _Lane:
    y: float
    direction: int


def _lanes(h: int, agent_h: float) -> List[_Lane]:
    n = max(2, int(h // (2.5 * agent_h)))
    gap = h / n
    return [_Lane(y=gap * (i + 0.5) - agent_h / 2, direction=1 if i % 2 == 0 else -1)
            for i in range(n)]


def agent_size(resolution: Tuple[int, int]) -> Tuple[float, float]:
    h, w = resolution
    return max(3.0, round(h / 8)), max(2.0, round(w * 3 / 32))


def _render_video(spec: SyntheticSpec, bg: np.ndarray, rng: np.random.Generator,
                  video_id: str, anomalous: bool) -> VideoSequence:
    H, W = spec.resolution
    T = spec.frames_per_video
    ah, aw = agent_size(spec.resolution)
    lanes = _lanes(H, ah)
    speed = float(spec.normal_speed)

    # normal agents spread round-robin over lanes, evenly spaced with jitter
    agents = []
    per_lane = [[] for _ in lanes]
    for k in range(spec.agent_count):
        per_lane[k % len(lanes)].append(k)
    period = W + aw
    for li, members in enumerate(per_lane):
        phase = rng.uniform(0, period)
        for j, _ in enumerate(members):
            x0 = (phase + j * period / max(1, len(members)) + rng.uniform(-2, 2)) % period
            shade = rng.uniform(35, 75)
            color = (shade, shade * rng.uniform(0.9, 1.1), shade * rng.uniform(0.9, 1.2))
            agents.append((lanes[li], x0, color, rng.uniform(0, 2)))

    anomaly = None
    if anomalous:
        lane_idx = int(rng.integers(len(lanes)))
        lane = lanes[lane_idx]
        t_start = T // 3
        kind = spec.anomaly_type
        ah_a, aw_a, vel = ah, aw, lane.direction * speed
        if kind is AnomalyType.FAST_MOVER:
            vel = lane.direction * speed * spec.anomaly_speed_multiplier
        elif kind is AnomalyType.WRONG_DIRECTION:
            vel = -lane.direction * speed
        else:
            ah_a, aw_a = 2 * ah, 3 * aw
        x_start = 0.0 if vel > 0 else W - aw_a
        y = min(max(lane.y - (ah_a - ah) / 2, 0.0), H - ah_a)
        shade = rng.uniform(35, 75)
        anomaly = {
            "type": kind.value, "lane": lane_idx, "t_start": t_start,
            "x_start": x_start, "y": y, "velocity": vel,
            "height": ah_a, "width": aw_a, "color": [shade, shade, shade],
            "phase": float(rng.uniform(0, 2)),
        }

    frames, masks = [], []
    for t in range(T):
        canvas = bg.copy()
        for lane, x0, color, phase in agents:
            x = (x0 + lane.direction * speed * t) % period - aw
            _render_rect(canvas, lane.y, x, ah, aw, color, phase)
        mask = np.zeros((H, W), bool)
        if anomaly is not None and t >= anomaly["t_start"]:
            x = anomaly["x_start"] + anomaly["velocity"] * (t - anomaly["t_start"])
            cov = _render_rect(canvas, anomaly["y"], x, anomaly["height"],
                               anomaly["width"], anomaly["color"], anomaly["phase"])
            mask = cov > 0
        px = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
        frames.append(Frame(px, t, video_id))
        masks.append(mask)

    gt = GroundTruth.from_masks(masks) if anomalous else None
    meta = {"anomaly": anomaly} if anomalous else {}
    return VideoSequence(frames, gt, (H, W), video_id, meta)


def generate_synthetic_corpus(spec: SyntheticSpec) -> DatasetSplit:
    """Deterministically render a train/test corpus from ``spec``.

    One static textured scene is shared by all videos. Agents move along
    horizontal lanes at ``normal_speed`` with alternating lane directions.
    From frame ``T // 3`` on, each test video adds exactly one anomalous
    agent whose covered pixels form the ground-truth mask.
    """
    spec.validate()
    root_seq = np.random.SeedSequence(spec.seed)
    bg_seq, train_seq, test_seq = root_seq.spawn(3)
    H, W = spec.resolution
    bg = _background(np.random.default_rng(bg_seq), H, W)
    train = [
        _render_video(spec, bg, np.random.default_rng(s), f"Train{i + 1:03d}", False)
        for i, s in enumerate(train_seq.spawn(spec.n_train_videos))
    ]
    test = [
        _render_video(spec, bg, np.random.default_rng(s), f"Test{i + 1:03d}", True)
        for i, s in enumerate(test_seq.spawn(spec.n_test_videos))
    ]
    return DatasetSplit(train, test)
