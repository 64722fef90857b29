"""Frozen semantic feature extractors for the appearance-channel difference.

Images enter in the network range [-1, 1] as H x W x 3 arrays (or 3 x H x W
tensors). Every extractor declares a spatial stride ``s`` and a channel count
``C``; an H x W input yields a ``ceil(H/s) x ceil(W/s) x C`` map.

Pretrained backbone weights are downloaded once into
``$CROSSGAN_CACHE/weights`` (default ``~/.cache/crossgan/weights``); the
filenames carry a hash prefix that is checked on download. Offline runs use
:func:`test_double_extractor`.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import torch

from .errors import ConfigurationError, ShapeError

CACHE_ENV = "CROSSGAN_CACHE"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "crossgan"))


@dataclass
class FeatureMap:
    values: np.ndarray  # h x w x C
    provenance: str

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


def _as_hwc(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
        if img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[-1] not in (1, 3):
            img = img.transpose(1, 2, 0)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {img.shape}")
    return img


class FeatureExtractor:
    identifier = "abstract"
    stride = 1
    channels = 0

    def output_shape(self, h: int, w: int) -> Tuple[int, int, int]:
        return math.ceil(h / self.stride), math.ceil(w / self.stride), self.channels

    def __call__(self, img) -> FeatureMap:
        return extract_features(self, img)

    def _extract(self, img: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class BoxPoolExtractor(FeatureExtractor):
    """Weight-free stand-in: per-channel mean over non-overlapping s x s blocks.

    Linear in its input; partial blocks at the right/bottom edge average over
    the pixels they actually contain.
    """

    def __init__(self, stride: int = 8):
        self.stride = stride
        self.channels = 3
        self.identifier = f"box-pool-s{stride}"

    def _extract(self, img):
        h, w, c = img.shape
        s = self.stride
        gh, gw = math.ceil(h / s), math.ceil(w / s)
        padded = np.zeros((gh * s, gw * s, c))
        padded[:h, :w] = img
        counts = np.zeros((gh * s, gw * s))
        counts[:h, :w] = 1.0
        sums = padded.reshape(gh, s, gw, s, c).sum(axis=(1, 3))
        n = counts.reshape(gh, s, gw, s).sum(axis=(1, 3))
        return sums / n[..., None]


def test_double_extractor() -> BoxPoolExtractor:
    return BoxPoolExtractor(8)


# keep pytest from collecting the factory as a test
test_double_extractor.__test__ = False


_BACKBONES = {
    # name: (torchvision builder, weights enum attr, feature slice end, stride, channels)
    "vgg16": ("vgg16", "VGG16_Weights", 30, 16, 512),
    "alexnet": ("alexnet", "AlexNet_Weights", 12, 16, 256),
}


def _alexnet_grid(n: int) -> int:
    n = (n + 4 - 11) // 4 + 1
    n = (n - 3) // 2 + 1
    return (n - 3) // 2 + 1


class TorchvisionExtractor(FeatureExtractor):
    """Last pre-pooling convolutional activation of an ImageNet backbone.

    ``vgg16`` (conv5_3, stride 16) is fully convolutional: the input is
    edge-padded to a multiple of 16. ``alexnet`` (conv5) has a coarser,
    irregular geometry, so the input is resized to the smallest size whose
    conv5 grid equals ``ceil(H/16)``.
    """

    def __init__(self, backbone: str = "vgg16", pretrained: bool = True):
        if backbone not in _BACKBONES:
            raise ConfigurationError(f"unknown backbone {backbone!r}; choose from {sorted(_BACKBONES)}")
        import torchvision.models as tvm

        builder, weights_name, end, stride, channels = _BACKBONES[backbone]
        model = getattr(tvm, builder)(weights=None)
        if pretrained:
            weights = getattr(tvm, weights_name).IMAGENET1K_V1
            wdir = cache_root() / "weights"
            wdir.mkdir(parents=True, exist_ok=True)
            try:
                state = torch.hub.load_state_dict_from_url(weights.url, model_dir=str(wdir),
                                                           check_hash=True, progress=False)
            except Exception as exc:
                raise ConfigurationError(
                    f"could not obtain {backbone} weights into {wdir} ({exc}); "
                    "use the test-double extractor offline") from exc
            model.load_state_dict(state)
        self.net = model.features[:end].eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.backbone = backbone
        self.stride = stride
        self.channels = channels
        self.identifier = f"{backbone}-{'imagenet' if pretrained else 'random'}"

    def _input_size(self, h: int, w: int) -> Tuple[int, int]:
        gh, gw = math.ceil(h / self.stride), math.ceil(w / self.stride)
        if self.backbone == "vgg16":
            return gh * 16, gw * 16

        def solve(g):
            n = 16 * g
            while _alexnet_grid(n) < g:
                n += 1
            return n
        return solve(gh), solve(gw)

    @torch.no_grad()
    def _extract(self, img):
        h, w, _ = img.shape
        x = torch.from_numpy(((img + 1.0) * 0.5).astype(np.float32)).permute(2, 0, 1)[None]
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        x = (x - mean) / std
        ih, iw = self._input_size(h, w)
        if self.backbone == "vgg16":
            x = torch.nn.functional.pad(x, (0, iw - w, 0, ih - h), mode="replicate")
        else:
            x = torch.nn.functional.interpolate(x, size=(ih, iw), mode="bilinear", align_corners=False)
        out = self.net(x)[0].permute(1, 2, 0).numpy().astype(np.float64)
        return out


def make_extractor(name: str = "test-double") -> FeatureExtractor:
    if name in ("test-double", "box", "box-pool"):
        return test_double_extractor()
    return TorchvisionExtractor(name, pretrained=True)


def extract_features(e: FeatureExtractor, img) -> FeatureMap:
    arr = _as_hwc(img)
    values = e._extract(arr)
    expected = e.output_shape(arr.shape[0], arr.shape[1])
    if values.shape != expected:
        raise ShapeError(f"{e.identifier}: produced {values.shape}, declared {expected}")
    return FeatureMap(values, e.identifier)
