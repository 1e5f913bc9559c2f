"""Core tensor types and resolution-change primitives.

A feature pyramid is an ordered, contiguous map from level index to a
C x H x W feature map, with roughly-halving spatial dims from one level to the
next.  All resampling here uses half-pixel-center alignment (the common
image-resize convention), channels-first layout everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

UPSAMPLE_METHODS = ("nearest", "bilinear", "bicubic")


@dataclass
class FeatureMap:
    """One C x H x W activation tensor tagged with its pyramid level index."""

    data: torch.Tensor
    level: int

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ValueError(
                f"FeatureMap data must be C x H x W, got shape {tuple(self.data.shape)}"
            )
        c, h, w = self.data.shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"FeatureMap dims must be >= 1, got {c}x{h}x{w}")
        if not torch.isfinite(self.data).all():
            raise ValueError(f"FeatureMap at level {self.level} contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class FeaturePyramid:
    """Contiguous level -> FeatureMap map covering levels [n_s, n_e]."""

    levels: dict[int, FeatureMap] = field(default_factory=dict)

    def __post_init__(self):
        self.levels = dict(sorted(self.levels.items()))

    @property
    def n_s(self) -> int:
        return min(self.levels)

    @property
    def n_e(self) -> int:
        return max(self.levels)

    def __getitem__(self, level: int) -> FeatureMap:
        return self.levels[level]

    def __contains__(self, level: int) -> bool:
        return level in self.levels

    def __iter__(self):
        return iter(self.levels)

    def items(self):
        return self.levels.items()


@dataclass
class Image:
    """3 x H x W RGB tensor with values in [0, 1]."""

    data: torch.Tensor
    ident: str | None = None

    def __post_init__(self):
        if self.data.dim() != 3 or self.data.shape[0] != 3:
            raise ValueError(f"Image data must be 3 x H x W, got {tuple(self.data.shape)}")
        h, w = self.data.shape[1:]
        if h < 8 or w < 8:
            raise ValueError(f"Image must be at least 8x8, got {h}x{w}")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("Image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def downsample_feature(fm: FeatureMap, s: float) -> FeatureMap:
    """Bilinearly shrink a feature map to floor(s*H) x floor(s*W)."""
    if not 0.0 < s < 1.0:
        raise ValueError(f"scale must be in (0, 1), got {s}")
    out_h = math.floor(s * fm.height)
    out_w = math.floor(s * fm.width)
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"scale {s} produces empty output for level {fm.level} "
            f"({fm.height}x{fm.width} -> {out_h}x{out_w})"
        )
    data = downsample_tensor(fm.data.unsqueeze(0), s).squeeze(0)
    return FeatureMap(data=data, level=fm.level)


def downsample_tensor(x: torch.Tensor, s: float) -> torch.Tensor:
    """Batched bilinear downsample of a B x C x H x W tensor to floor sizes."""
    out_h = math.floor(s * x.shape[-2])
    out_w = math.floor(s * x.shape[-1])
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)


def upsample_naive(fm: FeatureMap, method: str) -> FeatureMap:
    """Double a feature map's spatial dims with a fixed interpolation method."""
    data = upsample_tensor(fm.data.unsqueeze(0), method).squeeze(0)
    return FeatureMap(data=data, level=fm.level)


def upsample_tensor(x: torch.Tensor, method: str) -> torch.Tensor:
    """Batched 2x upsample of a B x C x H x W tensor."""
    if method not in UPSAMPLE_METHODS:
        raise ValueError(f"unknown upsample method {method!r}; expected one of {UPSAMPLE_METHODS}")
    h, w = x.shape[-2:]
    size = (2 * h, 2 * w)
    if method == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode=method, align_corners=False)


def validate_pyramid(pyr: FeaturePyramid) -> None:
    """Raise ValueError if any FeaturePyramid invariant is violated."""
    if not pyr.levels:
        raise ValueError("pyramid has no levels")
    levels = sorted(pyr.levels)
    for want, got in zip(range(levels[0], levels[-1] + 1), levels):
        if want != got:
            raise ValueError(f"pyramid levels not contiguous: missing level {want}")
    for lvl, fm in pyr.items():
        if fm.level != lvl:
            raise ValueError(f"map stored at level {lvl} is tagged level {fm.level}")
    channels = {lvl: fm.channels for lvl, fm in pyr.items()}
    ref_c = channels[levels[0]]
    for lvl, c in channels.items():
        if c != ref_c:
            raise ValueError(
                f"channel mismatch at level {lvl}: {c} vs {ref_c} at level {levels[0]}"
            )
    # Spatial halving within +-1 (odd input dims floor at every step).
    for lvl in levels[1:]:
        finer, coarser = pyr[lvl - 1], pyr[lvl]
        for name, a, b in (("height", finer.height, coarser.height),
                           ("width", finer.width, coarser.width)):
            if abs(a - 2 * b) > 1:
                raise ValueError(
                    f"{name} at level {lvl - 1} ({a}) is not ~2x level {lvl} ({b})"
                )
