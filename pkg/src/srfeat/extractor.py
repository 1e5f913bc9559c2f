"""FPN-style multi-scale feature extractor with a pluggable top-down upsampler.

The same class serves as the frozen target extractor (naive interpolation in
the top-down pathway) and as the trainable super-resolving extractor (shared
generator at every merge).  The backbone is deliberately tiny: a stride-2 stem
plus four down-sampling stages at strides 4/8/16/32.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import SrfGenerator
from .pyramid import FeatureMap, FeaturePyramid, Image, upsample_tensor

DEFAULT_WIDTHS = (32, 64, 128, 256)
LEVELS = (2, 3, 4, 5)
UPSAMPLERS = ("nearest", "bilinear", "bicubic", "srf")


def pad_to_multiple(x: torch.Tensor, multiple: int = 32) -> tuple[torch.Tensor, tuple[int, int]]:
    """Zero-pad a ...xHxW tensor symmetrically up to the next multiple.

    Returns the padded tensor and the (top, left) offset of the original
    content inside it.
    """
    h, w = x.shape[-2:]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    top, left = ph // 2, pw // 2
    if ph or pw:
        x = F.pad(x, (left, pw - left, top, ph - top))
    return x, (top, left)


class _Stage(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(),
            nn.Conv2d(c_out, c_out, 3, stride=1, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(),
        )

    def forward(self, x):
        return self.net(x)


class TinyBackbone(nn.Module):
    """Stride-2 stem + 4 stride-2 stages, producing features at strides 4..32."""

    def __init__(self, widths: tuple[int, ...] = DEFAULT_WIDTHS):
        super().__init__()
        if len(widths) != 4:
            raise ValueError(f"backbone needs 4 stage widths, got {widths}")
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        prev = widths[0]
        stages = []
        for w in widths:
            stages.append(_Stage(prev, w))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        h = self.stem(x)
        out = {}
        for idx, stage in enumerate(self.stages):
            h = stage(h)
            out[LEVELS[idx]] = h
        return out


class FpnExtractor(nn.Module):
    """Bottom-up backbone + lateral 1x1 convs + top-down merges over levels 2..5."""

    def __init__(
        self,
        channels: int = 256,
        widths: tuple[int, ...] = DEFAULT_WIDTHS,
        upsampler: str = "nearest",
        generator: SrfGenerator | None = None,
    ):
        super().__init__()
        if upsampler not in UPSAMPLERS:
            raise ValueError(f"unknown upsampler {upsampler!r}; expected one of {UPSAMPLERS}")
        if upsampler == "srf":
            if generator is None:
                raise ValueError("srf upsampler requires a generator instance")
            if generator.channels != channels:
                raise ValueError(
                    f"generator channels ({generator.channels}) must match "
                    f"pyramid channels ({channels})"
                )
        elif generator is not None:
            raise ValueError("generator given but upsampler is not 'srf'")
        self.channels = channels
        self.upsampler = upsampler
        self.backbone = TinyBackbone(widths)
        self.generator = generator
        self.laterals = nn.ModuleDict(
            {str(lvl): nn.Conv2d(w, channels, 1) for lvl, w in zip(LEVELS, widths)}
        )
        self.outputs = nn.ModuleDict(
            {str(lvl): nn.Conv2d(channels, channels, 3, padding=1) for lvl in LEVELS}
        )

    def backbone_forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        if x.shape[-2] < 32 or x.shape[-1] < 32:
            raise ValueError(
                f"image must be at least 32x32, got {x.shape[-2]}x{x.shape[-1]}"
            )
        x, _ = pad_to_multiple(x, 32)
        return self.backbone(x)

    def _upsample(self, merged: torch.Tensor) -> torch.Tensor:
        if self.upsampler == "srf":
            return self.generator(merged)
        return upsample_tensor(merged, self.upsampler)

    def fpn_forward(
        self, bottom_up: dict[int, torch.Tensor], return_upsampled: bool = False
    ):
        """Top-down pathway.  Optionally also returns the per-merge upsampled
        maps keyed by the level they feed (used for cross-level comparisons)."""
        merged = {}
        upsampled = {}
        top = LEVELS[-1]
        merged[top] = self.laterals[str(top)](bottom_up[top])
        for lvl in range(top - 1, LEVELS[0] - 1, -1):
            lat = self.laterals[str(lvl)](bottom_up[lvl])
            up = self._upsample(merged[lvl + 1])
            dh = up.shape[-2] - lat.shape[-2]
            dw = up.shape[-1] - lat.shape[-1]
            if not (0 <= dh <= 1 and 0 <= dw <= 1):
                raise RuntimeError(
                    f"upsampled map for level {lvl} has shape {tuple(up.shape[-2:])}, "
                    f"lateral is {tuple(lat.shape[-2:])}: beyond +-1 reconciliation"
                )
            if dh or dw:
                up = up[..., : lat.shape[-2], : lat.shape[-1]]
            upsampled[lvl] = up
            merged[lvl] = lat + up
        pyramid = {lvl: self.outputs[str(lvl)](merged[lvl]) for lvl in LEVELS}
        if return_upsampled:
            return pyramid, upsampled
        return pyramid

    def forward(self, x: torch.Tensor, return_upsampled: bool = False):
        return self.fpn_forward(self.backbone_forward(x), return_upsampled)


def init_extractor(
    channels: int,
    seed: int,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    upsampler: str = "nearest",
    generator: SrfGenerator | None = None,
) -> FpnExtractor:
    """Deterministically initialized extractor."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        ext = FpnExtractor(channels, widths, upsampler, generator)
    return ext


def backbone_forward(ext: FpnExtractor, img: Image, mode: str = "eval") -> dict[int, FeatureMap]:
    _set_mode(ext, mode)
    with torch.set_grad_enabled(mode == "train"):
        feats = ext.backbone_forward(img.data.unsqueeze(0))
    return {lvl: FeatureMap(data=t.squeeze(0), level=lvl) for lvl, t in feats.items()}


def fpn_forward(
    ext: FpnExtractor, bottom_up: dict[int, FeatureMap], mode: str = "eval"
) -> FeaturePyramid:
    _set_mode(ext, mode)
    raw = {lvl: fm.data.unsqueeze(0) for lvl, fm in bottom_up.items()}
    with torch.set_grad_enabled(mode == "train"):
        pyr = ext.fpn_forward(raw)
    return FeaturePyramid(
        levels={lvl: FeatureMap(data=t.squeeze(0), level=lvl) for lvl, t in pyr.items()}
    )


def extract_pyramid(ext: FpnExtractor, img: Image, mode: str = "eval") -> FeaturePyramid:
    """backbone_forward composed with fpn_forward on a single image."""
    _set_mode(ext, mode)
    with torch.set_grad_enabled(mode == "train"):
        pyr = ext(img.data.unsqueeze(0))
    return FeaturePyramid(
        levels={lvl: FeatureMap(data=t.squeeze(0), level=lvl) for lvl, t in pyr.items()}
    )


def _set_mode(module: nn.Module, mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")
