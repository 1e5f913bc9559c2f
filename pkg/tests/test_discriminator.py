"""Patch discriminator: resolution preservation, output range, determinism."""

import pytest
import torch

from srfeat.discriminator import (PatchDiscriminator, discriminator_forward,
                                  init_discriminator)
from srfeat.pyramid import FeatureMap


def test_resolution_preserved_many_sizes():
    disc = init_discriminator(4, 0, widths=(8, 8, 8))
    g = torch.Generator().manual_seed(0)
    for _ in range(25):
        h = int(torch.randint(1, 17, (1,), generator=g))
        w = int(torch.randint(1, 17, (1,), generator=g))
        out = disc(torch.rand(2, 4, h, w, generator=g))
        assert out.shape == (2, 1, h, w)


def test_output_in_unit_interval():
    disc = init_discriminator(4, 0, widths=(8, 8, 8))
    with torch.no_grad():
        out = disc(torch.randn(1, 4, 6, 6) * 10)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_default_width_progression():
    disc = PatchDiscriminator(16)
    assert disc.widths == (512, 1024, 1024)
    convs = [m for m in disc.blocks if isinstance(m, torch.nn.Conv2d)]
    assert [c.in_channels for c in convs] == [16, 512, 1024]
    assert [c.out_channels for c in convs] == [512, 1024, 1024]
    assert disc.score.out_channels == 1
    assert disc.score.kernel_size == (1, 1)


def test_deterministic_init():
    a = init_discriminator(4, 5, widths=(8, 8, 8))
    b = init_discriminator(4, 5, widths=(8, 8, 8))
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)


def test_channel_validation():
    disc = PatchDiscriminator(8, widths=(4, 4, 4))
    with pytest.raises(ValueError, match="channels"):
        disc(torch.rand(1, 4, 4, 4))
    with pytest.raises(ValueError, match="channels"):
        PatchDiscriminator(0)


def test_forward_wrapper():
    disc = init_discriminator(4, 0, widths=(8, 8, 8))
    fm = FeatureMap(data=torch.rand(4, 5, 7), level=2)
    out = discriminator_forward(disc, fm, mode="eval")
    assert out.shape == (1, 5, 7)
    assert not out.requires_grad
    with pytest.raises(ValueError, match="mode"):
        discriminator_forward(disc, fm, mode="bad")
