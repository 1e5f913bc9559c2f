"""Feature patch discriminator: per-position real/fake probability map.

Three stride-1 conv blocks (conv 3x3 + BN + LeakyReLU) followed by a 1x1 conv
to a single channel and a sigmoid, so the output resolution always equals the
input's.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .generator import BatchStatNorm2d
from .pyramid import FeatureMap

DEFAULT_WIDTHS = (512, 1024, 1024)
LEAKY_SLOPE = 0.2


class PatchDiscriminator(nn.Module):
    def __init__(self, channels: int, widths: tuple[int, ...] = DEFAULT_WIDTHS):
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        self.channels = channels
        self.widths = tuple(widths)
        layers = []
        prev = channels
        for w in self.widths:
            layers += [
                nn.Conv2d(prev, w, 3, stride=1, padding=1),
                # current-batch statistics only: the discriminator scores maps
                # from every pyramid level, whose statistics differ widely
                BatchStatNorm2d(w),
                nn.LeakyReLU(LEAKY_SLOPE),
            ]
            prev = w
        self.blocks = nn.Sequential(*layers)
        self.score = nn.Conv2d(prev, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.channels:
            raise ValueError(
                f"discriminator expects {self.channels} channels, got {x.shape[-3]}"
            )
        return torch.sigmoid(self.score(self.blocks(x)))


def init_discriminator(
    channels: int, seed: int, widths: tuple[int, ...] = DEFAULT_WIDTHS
) -> PatchDiscriminator:
    """Deterministically initialized discriminator."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        disc = PatchDiscriminator(channels, widths)
    return disc


def discriminator_forward(
    disc: PatchDiscriminator, fm: FeatureMap, mode: str = "eval"
) -> torch.Tensor:
    """Score one feature map; returns a 1 x H x W probability map in (0, 1)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    disc.train(mode == "train")
    with torch.set_grad_enabled(mode == "train"):
        return disc(fm.data.unsqueeze(0)).squeeze(0)
