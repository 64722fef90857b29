"""Conditional generator / patch discriminator pair and their losses.

The generator is a U-net: ``log2(H) - 2`` stride-2 encoder stages down to a
4x4 bottleneck, a mirrored decoder, and skip connections between matching
stages. Dropout in the innermost decoder stages is the only noise source and
draws from an explicit :class:`NoiseSource`, so generation is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

LOG_EPS = 1e-7
SUPPORTED_RESOLUTIONS = (8, 16, 32, 64, 128, 256, 512)


class Direction(str, Enum):
    F2O = "F2O"
    O2F = "O2F"

    @property
    def arrow(self) -> str:
        return "F→O" if self is Direction.F2O else "O→F"

    @classmethod
    def parse(cls, value) -> "Direction":
        if isinstance(value, Direction):
            return value
        text = str(value).replace("→", "2").replace("->", "2").upper()
        return cls(text)


@dataclass
class NoiseSource:
    """Dropout switch plus a private RNG.

    With the same seed, the same sequence of forward passes draws the same
    dropout masks.
    """

    enabled: bool = True
    seed: int = 0
    generator: torch.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.generator = torch.Generator()
        self.generator.manual_seed(int(self.seed))

    def reseed(self, seed: int):
        self.seed = int(seed)
        self.generator.manual_seed(self.seed)

    def dropout(self, h: torch.Tensor, rate: float) -> torch.Tensor:
        if not self.enabled or rate <= 0:
            return h
        keep = torch.rand(h.shape, generator=self.generator, dtype=h.dtype) >= rate
        return h * keep / (1.0 - rate)


def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=True)


class Generator(nn.Module):
    def __init__(self, resolution: int = 256, direction=Direction.F2O, ngf: int = 64,
                 dropout: float = 0.5, in_channels: int = 3, out_channels: int = 3,
                 dropout_stages: int = 3):
        super().__init__()
        if resolution not in SUPPORTED_RESOLUTIONS:
            raise ShapeError(f"unsupported resolution {resolution}")
        self.resolution = resolution
        self.direction = Direction.parse(direction)
        self.ngf = ngf
        self.dropout_rate = dropout
        self.depth = int(math.log2(resolution)) - 2
        widths = [ngf * min(8, 2 ** i) for i in range(self.depth)]
        self.widths = widths

        self.down = nn.ModuleList()
        prev = in_channels
        for i, w in enumerate(widths):
            layers = [] if i == 0 else [nn.LeakyReLU(0.2)]
            layers.append(nn.Conv2d(prev, w, 4, 2, 1))
            if i > 0:
                layers.append(_norm(w))
            self.down.append(nn.Sequential(*layers))
            prev = w

        # decoder stage k maps the concatenated features back up one level
        self.up = nn.ModuleList()
        for i in reversed(range(self.depth)):
            inner = widths[i] if i == self.depth - 1 else 2 * widths[i]
            if i == 0:
                self.up.append(nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(inner, out_channels, 4, 2, 1),
                                             nn.Tanh()))
            else:
                self.up.append(nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(inner, widths[i - 1], 4, 2, 1),
                                             _norm(widths[i - 1])))
        self.dropout_stages = min(dropout_stages, self.depth - 1)

    def forward(self, x: torch.Tensor, noise: Optional[NoiseSource] = None) -> torch.Tensor:
        if x.shape[-2:] != (self.resolution, self.resolution):
            raise ShapeError(
                f"generator configured for {self.resolution}x{self.resolution}, got {tuple(x.shape[-2:])}")
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
        skips.pop()
        for k, block in enumerate(self.up):
            h = block(h)
            if k < self.dropout_stages and noise is not None:
                h = noise.dropout(h, self.dropout_rate)
            if skips:
                h = torch.cat([h, skips.pop()], dim=1)
        return h

    def descriptor(self) -> dict:
        return {"kind": "unet", "resolution": self.resolution, "direction": self.direction.value,
                "ngf": self.ngf, "dropout": self.dropout_rate, "depth": self.depth}


class PatchDiscriminator(nn.Module):
    """Conditional patch discriminator; sees condition and candidate stacked on channels.

    With ``n_layers=3`` every output cell has a 70x70 receptive field. The last
    convolution starts at zero, so an untrained discriminator outputs exactly
    0.5 everywhere.
    """

    def __init__(self, in_channels: int = 6, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        self.ndf = ndf
        self.n_layers = n_layers
        layers: List[nn.Module] = [nn.Conv2d(in_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, 2, 1), _norm(ndf * mult), nn.LeakyReLU(0.2)]
        prev, mult = mult, min(2 ** n_layers, 8)
        layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, 1, 1), _norm(ndf * mult), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(ndf * mult, 1, 4, 1, 1)

    def forward(self, x: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if x.shape != candidate.shape:
            raise ShapeError(f"condition {tuple(x.shape)} and candidate {tuple(candidate.shape)} differ")
        return torch.sigmoid(self.head(self.body(torch.cat([x, candidate], dim=1))))

    def _convs(self):
        return [m for m in list(self.body) + [self.head] if isinstance(m, nn.Conv2d)]

    def patch_grid(self, h: int, w: int) -> Tuple[int, int]:
        for conv in self._convs():
            k, s, p = conv.kernel_size[0], conv.stride[0], conv.padding[0]
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        return h, w

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for conv in self._convs():
            rf += (conv.kernel_size[0] - 1) * jump
            jump *= conv.stride[0]
        return rf

    def descriptor(self) -> dict:
        return {"kind": "patch", "ndf": self.ndf, "n_layers": self.n_layers,
                "receptive_field": self.receptive_field()}


# Aliases matching the pipeline's vocabulary.
GeneratorState = Generator
DiscriminatorState = PatchDiscriminator


def init_weights(module: nn.Module, generator: Optional[torch.Generator] = None, std: float = 0.02):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.normal_(m.weight, 1.0, std, generator=generator)
            nn.init.zeros_(m.bias)
    if isinstance(module, PatchDiscriminator):
        nn.init.zeros_(module.head.weight)
        nn.init.zeros_(module.head.bias)


def generator_forward(g: Generator, x: torch.Tensor, noise: Optional[NoiseSource] = None) -> torch.Tensor:
    """Run ``g`` on one image (C, H, W) or a batch (N, C, H, W)."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.shape[1] != 3:
        raise ShapeError(f"expected 3 input channels, got {x.shape[1]}")
    out = g(x, noise)
    return out[0] if single else out


def discriminator_forward(d: PatchDiscriminator, x: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
    single = x.dim() == 3
    if single:
        x, candidate = x.unsqueeze(0), candidate.unsqueeze(0)
    out = d(x, candidate)
    return out[0, 0] if single else out


def l1_loss(y: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    if y.shape != p.shape:
        raise ShapeError(f"l1_loss shapes differ: {tuple(y.shape)} vs {tuple(p.shape)}")
    return (y - p).abs().mean()


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_EPS, 1.0 - LOG_EPS))


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return -_safe_log(d_real).mean() - _safe_log(1.0 - d_fake).mean()


def generator_adversarial_loss(d_fake: torch.Tensor) -> torch.Tensor:
    # non-saturating form
    return -_safe_log(d_fake).mean()


def cgan_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(loss_D, loss_G_adv)`` from patch probability maps."""
    return discriminator_loss(d_real, d_fake), generator_adversarial_loss(d_fake)
