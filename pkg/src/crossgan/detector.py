"""Abnormality heatmaps from the two generators' reconstruction errors.

Per test video the work runs in two passes. Pass one computes, for every
frame pair, the flow difference between the real flow image and its
reconstruction from the frame, and the semantic difference between the frame
and its reconstruction from the flow (upsampled to network resolution).
Pass two divides each channel by its video-wide maximum and fuses
``A = N_S + lam * N_O``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .dataset import VideoSequence
from .errors import ConfigurationError, DegenerateVideoError, FlowFormatError, ShapeError
from .gan import Direction, Generator, NoiseSource
from .optflow import FlowCache, FlowImage, FlowRange
from .perception import FeatureExtractor, FeatureMap, extract_features
from .trainer import flow_image_to_tensor, flow_to_image, frame_to_tensor

DEFAULT_LAMBDA = 2.0
AMP_MAGIC = b"AMP1"

CHANNELS = ("optical_flow", "semantic", "semantic_upsampled")


@dataclass
class DifferenceMap:
    values: np.ndarray
    channel: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("difference maps must be finite and nonnegative")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class AbnormalityMap:
    values: np.ndarray
    frame_index: int
    lam: float
    m_O: float = 0.0
    m_S: float = 0.0
    video_id: str = ""

    @property
    def shape(self):
        return self.values.shape


def _check_direction(g: Generator, expected: Direction):
    if Direction.parse(g.direction) is not expected:
        raise ConfigurationError(
            f"expected a {expected.arrow} generator, got {Direction.parse(g.direction).arrow}")


@torch.no_grad()
def reconstruct_flow(g: Generator, frame: torch.Tensor, mapping: FlowRange,
                     noise: Optional[NoiseSource] = None) -> FlowImage:
    """Flow image the F->O generator expects for ``frame`` (3 x R x R tensor)."""
    _check_direction(g, Direction.F2O)
    out = g(frame.unsqueeze(0), noise)[0]
    return FlowImage(out.permute(1, 2, 0).numpy().astype(np.float32), mapping)


@torch.no_grad()
def reconstruct_frame(g: Generator, flow, noise: Optional[NoiseSource] = None) -> np.ndarray:
    """Appearance the O->F generator produces for a flow image; R x R x 3 in [-1, 1]."""
    _check_direction(g, Direction.O2F)
    x = flow_image_to_tensor(flow) if isinstance(flow, FlowImage) else flow
    out = g(x.unsqueeze(0), noise)[0]
    return out.permute(1, 2, 0).numpy()


def _channels(img) -> np.ndarray:
    if isinstance(img, FlowImage):
        return img.channels.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def flow_difference(real, generated) -> DifferenceMap:
    """Per-pixel sum over the three flow channels of |real - generated|."""
    a, b = _channels(real), _channels(generated)
    if a.shape != b.shape:
        raise ShapeError(f"flow images differ in shape: {a.shape} vs {b.shape}")
    return DifferenceMap(np.abs(a - b).sum(axis=-1), "optical_flow")


def semantic_difference(h_real: FeatureMap, h_gen: FeatureMap) -> DifferenceMap:
    """Per-location mean over feature channels of |h(F) - h(p_F)|."""
    if h_real.provenance != h_gen.provenance:
        raise ConfigurationError(
            f"feature maps come from different extractors: {h_real.provenance} vs {h_gen.provenance}")
    if h_real.shape != h_gen.shape:
        raise ShapeError(f"feature maps differ in shape: {h_real.shape} vs {h_gen.shape}")
    return DifferenceMap(np.abs(h_real.values - h_gen.values).mean(axis=-1), "semantic")


def upsample_map(m: DifferenceMap, target_dims: Tuple[int, int]) -> DifferenceMap:
    """Bilinear upsampling with corner alignment, so corner values are kept."""
    h, w = m.shape
    th, tw = target_dims
    if th < h or tw < w:
        raise ConfigurationError(f"cannot upsample {m.shape} to smaller {target_dims}")
    t = torch.from_numpy(m.values)[None, None]
    if (th, tw) == (h, w):
        out = m.values.copy()
    else:
        out = F.interpolate(t, size=(th, tw), mode="bilinear", align_corners=True)[0, 0].numpy()
    # interpolation weights are convex; clip only float round-off
    return DifferenceMap(np.clip(out, 0.0, None), "semantic_upsampled")


def normalize_per_video(maps: Sequence, channel: Optional[str] = None) -> Tuple[List[np.ndarray], float]:
    """Divide every map of one video by the video-wide maximum ``m``.

    Returns ``(normalized, m)``. When ``m == 0`` all outputs are zero.
    """
    if len(maps) == 0:
        raise ConfigurationError("normalize_per_video needs at least one map")
    arrays = []
    for mp in maps:
        if isinstance(mp, DifferenceMap):
            if channel is not None and mp.channel != channel:
                raise ConfigurationError(f"mixed channels: {mp.channel} vs {channel}")
            arrays.append(mp.values)
        else:
            arrays.append(np.asarray(mp, dtype=np.float64))
    m = float(max(a.max() for a in arrays))
    if m == 0.0:
        return [np.zeros_like(a) for a in arrays], 0.0
    return [a / m for a in arrays], m


def fuse(n_s: np.ndarray, n_o: np.ndarray, lam: float = DEFAULT_LAMBDA, frame_index: int = 0,
         m_O: float = 0.0, m_S: float = 0.0, video_id: str = "") -> AbnormalityMap:
    n_s, n_o = np.asarray(n_s, dtype=np.float64), np.asarray(n_o, dtype=np.float64)
    if n_s.shape != n_o.shape:
        raise ShapeError(f"cannot fuse maps of shape {n_s.shape} and {n_o.shape}")
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    return AbnormalityMap(n_s + lam * n_o, frame_index, lam, m_O, m_S, video_id)


def resize_map(values: np.ndarray, dims: Tuple[int, int]) -> np.ndarray:
    h, w = dims
    if values.shape == (h, w):
        return values.copy()
    return cv2.resize(values.astype(np.float64), (w, h), interpolation=cv2.INTER_LINEAR)


def frame_noise_seed(seed: int, video_id: str, t: int, salt: str) -> int:
    digest = hashlib.sha256(f"{seed}:{video_id}:{t}:{salt}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


@dataclass
class VideoDifferences:
    """Pass-one output for one video, kept so ablations can re-fuse without the networks."""

    video_id: str
    flow: List[np.ndarray]
    semantic: List[np.ndarray]
    source_resolution: Tuple[int, int]
    reconstructions: dict = field(default_factory=dict)


def video_differences(video: VideoSequence, gen_fo: Generator, gen_of: Generator,
                      extractor: FeatureExtractor, mapping: FlowRange,
                      cache: Optional[FlowCache] = None, dropout: bool = True, seed: int = 0,
                      keep_reconstructions: bool = False) -> VideoDifferences:
    _check_direction(gen_fo, Direction.F2O)
    _check_direction(gen_of, Direction.O2F)
    if gen_fo.resolution != gen_of.resolution:
        raise ConfigurationError("generators were trained at different resolutions")
    if len(video) < 2:
        raise DegenerateVideoError(f"{video.video_id}: need at least 2 frames")
    cache = cache or FlowCache()
    res = gen_fo.resolution
    noise_fo, noise_of = NoiseSource(dropout, seed), NoiseSource(dropout, seed)
    flow_d, sem_d = [], []
    recon = {"p_O": [], "p_F": []}
    for t in range(len(video) - 1):
        frame = frame_to_tensor(video[t], res)
        real_flow = flow_to_image(cache.get(video, t), res, mapping)
        noise_fo.reseed(frame_noise_seed(seed, video.video_id, t, "F2O"))
        noise_of.reseed(frame_noise_seed(seed, video.video_id, t, "O2F"))
        p_o = reconstruct_flow(gen_fo, frame, mapping, noise_fo)
        p_f = reconstruct_frame(gen_of, real_flow, noise_of)
        flow_d.append(flow_difference(real_flow, p_o).values)
        h_real = extract_features(extractor, frame.permute(1, 2, 0).numpy())
        h_gen = extract_features(extractor, p_f)
        sem = upsample_map(semantic_difference(h_real, h_gen), (res, res))
        sem_d.append(sem.values)
        if keep_reconstructions:
            recon["p_O"].append(p_o)
            recon["p_F"].append(p_f)
    return VideoDifferences(video.video_id, flow_d, sem_d, tuple(video.source_resolution),
                            recon if keep_reconstructions else {})


def fuse_video(diffs: VideoDifferences, lam: float = DEFAULT_LAMBDA,
               out_dims: Optional[Tuple[int, int]] = None) -> List[AbnormalityMap]:
    """Pass two: per-video normalization, fusion and resize to ``out_dims``."""
    n_o, m_o = normalize_per_video(diffs.flow)
    n_s, m_s = normalize_per_video(diffs.semantic)
    dims = out_dims or diffs.source_resolution
    maps = []
    for t, (s, o) in enumerate(zip(n_s, n_o)):
        a = fuse(s, o, lam, t, m_o, m_s, diffs.video_id)
        a.values = np.clip(resize_map(a.values, dims), 0.0, 1.0 + lam)
        maps.append(a)
    return maps


def detect_video(video: VideoSequence, gen_fo: Generator, gen_of: Generator,
                 extractor: FeatureExtractor, lam: float = DEFAULT_LAMBDA,
                 mapping: Optional[FlowRange] = None, cache: Optional[FlowCache] = None,
                 dropout: bool = True, seed: int = 0) -> List[AbnormalityMap]:
    """T-1 abnormality maps at the video's source resolution; map t uses frames t and t+1."""
    if mapping is None:
        raise ConfigurationError("a flow range mapping (from the training checkpoint) is required")
    diffs = video_differences(video, gen_fo, gen_of, extractor, mapping, cache, dropout, seed)
    return fuse_video(diffs, lam)


# --------------------------------------------------------------------------
# raw map container: b"AMP1" | u32 H | u32 W | H*W float32 (little-endian, row-major)

def write_amp(path, values: np.ndarray):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError("AMP1 maps are single-channel 2-D arrays")
    h, w = values.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(AMP_MAGIC + struct.pack("<II", h, w)
                           + np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_amp(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != AMP_MAGIC:
        raise FlowFormatError(f"{path}: not an AMP1 file")
    h, w = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * h * w:
        raise FlowFormatError(f"{path}: size does not match declared {h}x{w}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)
