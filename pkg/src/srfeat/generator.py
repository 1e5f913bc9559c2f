"""Feature super-resolution generator: any C x H x W map -> C x 2H x 2W.

Residual-in-residual layout: a conv stem, 5 residual blocks, a post conv,
a stride-2 transposed conv, and a 1x1 projection back to C channels, summed
with a bilinear 2x upsample of the input.  The projection is zero-initialized
so a freshly built generator is exactly bilinear interpolation.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .pyramid import FeatureMap, upsample_tensor

NUM_RESIDUAL_BLOCKS = 5
LEAKY_SLOPE = 0.2


class BatchStatNorm2d(nn.Module):
    """Batch norm over current-batch statistics only (no running averages).

    The generator and discriminator are shared across pyramid levels whose
    activation statistics differ widely; running averages would blend them and
    skew every level at eval time.  Per-forward statistics keep eval
    deterministic and level-local, and 1x1 maps degrade gracefully (variance 0)
    instead of erroring.
    """

    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(0, 2, 3), keepdim=True)
        var = x.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def _norm(width: int) -> BatchStatNorm2d:
    return BatchStatNorm2d(width)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.bn1 = _norm(width)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.bn2 = _norm(width)

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return x + h


class SrfGenerator(nn.Module):
    """2x feature super-resolver, shared across all pyramid levels."""

    def __init__(self, channels: int):
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        self.channels = channels
        w = channels  # internal width kept equal to C; the projection is square
        self.stem = nn.Conv2d(channels, w, 3, padding=1)
        self.stem_act = nn.LeakyReLU(LEAKY_SLOPE)
        self.blocks = nn.ModuleList(ResidualBlock(w) for _ in range(NUM_RESIDUAL_BLOCKS))
        self.post = nn.Conv2d(w, w, 3, padding=1)
        self.post_bn = _norm(w)
        self.post_act = nn.LeakyReLU(LEAKY_SLOPE)
        # kernel 4 / stride 2 / padding 1: exact 2x doubling
        self.deconv = nn.ConvTranspose2d(w, w, 4, stride=2, padding=1)
        self.deconv_bn = _norm(w)
        self.deconv_act = nn.LeakyReLU(LEAKY_SLOPE)
        self.proj = nn.Conv2d(w, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.channels:
            raise ValueError(
                f"generator expects {self.channels} channels, got {x.shape[-3]}"
            )
        shortcut = upsample_tensor(x, "bilinear")
        h = self.stem_act(self.stem(x))
        for block in self.blocks:
            h = block(h)
        h = self.post_act(self.post_bn(self.post(h)))
        h = self.deconv_act(self.deconv_bn(self.deconv(h)))
        return self.proj(h) + shortcut


def init_generator(channels: int, seed: int) -> SrfGenerator:
    """Deterministically initialized generator (bit-identical for equal seeds)."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = SrfGenerator(channels)
    return gen


def generator_forward(gen: SrfGenerator, fm: FeatureMap, mode: str = "eval") -> FeatureMap:
    """Run the generator on one feature map; eval mode is deterministic."""
    _set_mode(gen, mode)
    grad = mode == "train"
    with torch.set_grad_enabled(grad):
        out = gen(fm.data.unsqueeze(0)).squeeze(0)
    return FeatureMap(data=out, level=fm.level)


def _set_mode(module: nn.Module, mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")
