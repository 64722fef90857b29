"""Dense optical flow and its three-channel image encoding.

The estimator is a coarse-to-fine variational scheme: robust (Charbonnier)
brightness constancy plus robust smoothness, linearised around the current
estimate, re-warped several times per pyramid level and solved with red-black
SOR. Any estimator producing a :class:`FlowField` can be swapped in; flow
computed elsewhere is loaded with :func:`load_precomputed_flow`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Tuple

import cv2
import numpy as np
from scipy import ndimage

from .errors import FlowFormatError, NumericError, ShapeError

FLOW_MAGIC = b"FLO1"


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ShapeError(f"u {self.u.shape} and v {self.v.shape} must be equal 2-D shapes")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u.astype(np.float64), self.v.astype(np.float64))

    def resized(self, size: Tuple[int, int]) -> "FlowField":
        """Bilinear resize to ``size`` = (H, W), rescaling displacements to the new pixel units."""
        h, w = self.shape
        nh, nw = size
        if (h, w) == (nh, nw):
            return FlowField(self.u.copy(), self.v.copy())
        u = cv2.resize(self.u, (nw, nh), interpolation=cv2.INTER_LINEAR) * (nw / w)
        v = cv2.resize(self.v, (nw, nh), interpolation=cv2.INTER_LINEAR) * (nh / h)
        return FlowField(u, v)


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 4
    scale: float = 0.5
    min_size: int = 8
    warps: int = 3
    outer_iters: int = 2
    sor_iters: int = 10
    omega: float = 1.8
    alpha: float = 0.01
    eps: float = 1e-3
    presmooth: float = 0.8
    border: int = 0

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3:
        img = img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return img.astype(np.float64) / 255.0


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    return cv2.remap(img.astype(np.float32), xx + u.astype(np.float32),
                     yy + v.astype(np.float32), cv2.INTER_CUBIC,
                     borderMode=cv2.BORDER_REPLICATE).astype(np.float64)


def _grad(img: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    kern = np.array([-1.0, 8.0, 0.0, -8.0, 1.0]) / 12.0
    gx = ndimage.correlate1d(img, kern[::-1], axis=1, mode="nearest")
    gy = ndimage.correlate1d(img, kern[::-1], axis=0, mode="nearest")
    return gx, gy


def _charbonnier_prime(s2: np.ndarray, eps: float) -> np.ndarray:
    return 0.5 / np.sqrt(s2 + eps * eps)


def _pad(a):
    return np.pad(a, 1, mode="edge")


def _solve_level(i1, i2, u, v, cfg: FlowConfig):
    h, w = i1.shape
    checker = (np.add.outer(np.arange(h), np.arange(w)) % 2).astype(bool)
    phases = (~checker, checker)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(cfg.warps):
        i2w = _warp(i2, u, v)
        # no brightness evidence where the match falls outside the second frame;
        # smoothness fills those pixels in from their neighbours
        inside = ((xx + u >= 0) & (xx + u <= w - 1) & (yy + v >= 0) & (yy + v <= h - 1))
        gx1, gy1 = _grad(i1)
        gx2, gy2 = _grad(i2w)
        ix, iy = 0.5 * (gx1 + gx2), 0.5 * (gy1 + gy2)
        it = i2w - i1
        du = np.zeros_like(u)
        dv = np.zeros_like(v)
        for _ in range(cfg.outer_iters):
            res = it + ix * du + iy * dv
            wd = _charbonnier_prime(res * res, cfg.eps) * inside
            uu, vv = u + du, v + dv
            ux, uy = np.gradient(uu)[1], np.gradient(uu)[0]
            vx, vy = np.gradient(vv)[1], np.gradient(vv)[0]
            ws = _charbonnier_prime(ux * ux + uy * uy + vx * vx + vy * vy, cfg.eps)
            wp = _pad(ws)
            # edge weights towards N, S, W, E neighbours; zero across the image border
            wn = 0.5 * (ws + wp[:-2, 1:-1]); wn[0, :] = 0
            wsd = 0.5 * (ws + wp[2:, 1:-1]); wsd[-1, :] = 0
            ww = 0.5 * (ws + wp[1:-1, :-2]); ww[:, 0] = 0
            we = 0.5 * (ws + wp[1:-1, 2:]); we[:, -1] = 0
            wsum = wn + wsd + ww + we
            a = cfg.alpha
            for _ in range(cfg.sor_iters):
                for phase in phases:
                    up, vp = _pad(u + du), _pad(v + dv)
                    nb_u = (wn * up[:-2, 1:-1] + wsd * up[2:, 1:-1]
                            + ww * up[1:-1, :-2] + we * up[1:-1, 2:])
                    nb_v = (wn * vp[:-2, 1:-1] + wsd * vp[2:, 1:-1]
                            + ww * vp[1:-1, :-2] + we * vp[1:-1, 2:])
                    num_u = a * (nb_u - wsum * u) - wd * ix * (it + iy * dv)
                    den_u = wd * ix * ix + a * wsum + 1e-12
                    new_du = num_u / den_u
                    du[phase] += cfg.omega * (new_du[phase] - du[phase])
                    num_v = a * (nb_v - wsum * v) - wd * iy * (it + ix * du)
                    den_v = wd * iy * iy + a * wsum + 1e-12
                    new_dv = num_v / den_v
                    dv[phase] += cfg.omega * (new_dv[phase] - dv[phase])
        u = u + du
        v = v + dv
        # median filtering after each warp suppresses outliers
        u = ndimage.median_filter(u, size=3, mode="nearest")
        v = ndimage.median_filter(v, size=3, mode="nearest")
    return u, v


def _pyramid(img: np.ndarray, cfg: FlowConfig):
    levels = [img]
    while len(levels) < cfg.levels:
        h, w = levels[-1].shape
        nh, nw = int(round(h * cfg.scale)), int(round(w * cfg.scale))
        if min(nh, nw) < cfg.min_size:
            break
        smooth = ndimage.gaussian_filter(levels[-1], 1.0 / (2 * cfg.scale) ** 0.5 * 0.8, mode="nearest")
        levels.append(cv2.resize(smooth, (nw, nh), interpolation=cv2.INTER_AREA))
    return levels[::-1]


def estimate_flow(a, b, cfg: FlowConfig = FlowConfig()) -> FlowField:
    """Dense flow from frame ``a`` to frame ``b``, so that b(x + w(x)) ~ a(x)."""
    pa = getattr(a, "pixels", a)
    pb = getattr(b, "pixels", b)
    if np.shape(pa) != np.shape(pb):
        raise ShapeError(f"frame shapes differ: {np.shape(pa)} vs {np.shape(pb)}")
    i1, i2 = _gray(pa), _gray(pb)
    h, w = i1.shape
    if cfg.presmooth > 0:
        i1 = ndimage.gaussian_filter(i1, cfg.presmooth, mode="nearest")
        i2 = ndimage.gaussian_filter(i2, cfg.presmooth, mode="nearest")
    p1, p2 = _pyramid(i1, cfg), _pyramid(i2, cfg)
    u = np.zeros_like(p1[0])
    v = np.zeros_like(p1[0])
    for lvl, (l1, l2) in enumerate(zip(p1, p2)):
        if lvl > 0:
            lh, lw = l1.shape
            ph, pw = u.shape
            u = cv2.resize(u, (lw, lh), interpolation=cv2.INTER_LINEAR) * (lw / pw)
            v = cv2.resize(v, (lw, lh), interpolation=cv2.INTER_LINEAR) * (lh / ph)
        u, v = _solve_level(l1, l2, u, v, cfg)
    if cfg.border > 0:
        bd = cfg.border
        for f in (u, v):
            f[:bd, :] = 0
            f[-bd:, :] = 0
            f[:, :bd] = 0
            f[:, -bd:] = 0
    return FlowField(u, v)


# --------------------------------------------------------------------------
# three-channel encoding

@dataclass(frozen=True)
class FlowRange:
    """Per-channel affine map raw -> [-1, 1]: mapped = 2 * (raw - lo) / (hi - lo) - 1."""

    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(x) for x in d["lo"]), tuple(float(x) for x in d["hi"]))

    @classmethod
    def fit(cls, fields: Iterable[FlowField], low_pct=1.0, high_pct=99.0, min_span=1.0):
        """Freeze a mapping from the 1st/99th percentiles of a set of flow fields.

        Spans narrower than ``min_span`` pixels are widened around their
        midpoint, so a channel with (almost) no motion keeps a sane scale.
        """
        chans = [[], [], []]
        for f in fields:
            chans[0].append(f.u.ravel())
            chans[1].append(f.v.ravel())
            chans[2].append(f.magnitude().ravel())
        if not chans[0]:
            raise ValueError("need at least one flow field to fit a range")
        lo, hi = [], []
        for c in chans:
            vals = np.concatenate(c)
            l, h = np.percentile(vals, [low_pct, high_pct])
            if h - l < min_span:
                mid = 0.5 * (l + h)
                l, h = mid - min_span / 2, mid + min_span / 2
            lo.append(float(l))
            hi.append(float(h))
        return cls(tuple(lo), tuple(hi))


DEFAULT_RANGE = FlowRange((-4.0, -4.0, 0.0), (4.0, 4.0, 4.0))


@dataclass
class FlowImage:
    channels: np.ndarray  # H x W x 3 float32, mapped
    mapping: FlowRange

    @property
    def shape(self):
        return self.channels.shape[:2]

    def raw(self) -> np.ndarray:
        lo = np.asarray(self.mapping.lo, dtype=np.float64)
        hi = np.asarray(self.mapping.hi, dtype=np.float64)
        return (self.channels.astype(np.float64) + 1.0) * 0.5 * (hi - lo) + lo


def encode_flow(f: FlowField, mapping: FlowRange = DEFAULT_RANGE) -> FlowImage:
    u = f.u.astype(np.float64)
    v = f.v.astype(np.float64)
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NumericError("flow contains non-finite values")
    raw = np.stack([u, v, np.hypot(u, v)], axis=-1)
    lo = np.asarray(mapping.lo)
    hi = np.asarray(mapping.hi)
    mapped = 2.0 * (raw - lo) / (hi - lo) - 1.0
    return FlowImage(mapped.astype(np.float32), mapping)


def decode_flow(img: FlowImage) -> FlowField:
    raw = img.raw()
    return FlowField(raw[..., 0], raw[..., 1])


# --------------------------------------------------------------------------
# FLO1 container

def write_flow(path, f: FlowField, magic: bytes = FLOW_MAGIC):
    h, w = f.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(f.u, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(f.v, dtype="<f4").tobytes())
    tmp.replace(path)


def _read_container(path, magic: bytes, n_planes: int):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != magic:
        raise FlowFormatError(f"{path}: bad magic or header")
    h, w = struct.unpack("<II", data[4:12])
    expected = 12 + n_planes * h * w * 4
    if len(data) != expected:
        raise FlowFormatError(
            f"{path}: header declares {h}x{w} ({expected} bytes) but file has {len(data)} bytes")
    planes = np.frombuffer(data, dtype="<f4", offset=12).reshape(n_planes, h, w)
    return planes.astype(np.float32)


def load_precomputed_flow(path) -> FlowField:
    planes = _read_container(path, FLOW_MAGIC, 2)
    return FlowField(planes[0], planes[1])


class FlowCache:
    """Flow fields per (video id, estimator config), memoised in memory and optionally on disk.

    On-disk layout: ``<root>/<config digest>/<video id>/NNNN.flo``.
    """

    def __init__(self, root=None, cfg: FlowConfig = FlowConfig()):
        self.root = Path(root) if root is not None else None
        self.cfg = cfg
        self._memory = {}

    def _path(self, video_id: str, t: int) -> Path:
        return self.root / self.cfg.digest() / video_id / f"{t:04d}.flo"

    def get(self, video, t: int) -> FlowField:
        key = (video.video_id, t)
        if key in self._memory:
            return self._memory[key]
        flow = None
        if self.root is not None:
            path = self._path(video.video_id, t)
            if path.is_file():
                flow = load_precomputed_flow(path)
        if flow is None:
            flow = estimate_flow(video.frames[t], video.frames[t + 1], self.cfg)
            if self.root is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                write_flow(path, flow)
        self._memory[key] = flow
        return flow

    def video_flows(self, video):
        return [self.get(video, t) for t in range(len(video) - 1)]
