"""Super-resolution generator: shape law, bilinear-at-init identity,
determinism, and gradient flow (finite differences)."""

import pytest
import torch

from srfeat.generator import (NUM_RESIDUAL_BLOCKS, SrfGenerator,
                              generator_forward, init_generator)
from srfeat.pyramid import FeatureMap, upsample_tensor


def test_output_shape_doubles():
    gen = init_generator(8, 0)
    for h, w in [(1, 1), (3, 5), (8, 8), (7, 13)]:
        out = gen(torch.rand(2, 8, h, w))
        assert out.shape == (2, 8, 2 * h, 2 * w)


def test_init_is_exactly_bilinear():
    gen = init_generator(6, 123)
    gen.eval()
    for h, w in [(2, 2), (5, 7), (9, 3)]:
        x = torch.rand(1, 6, h, w)
        with torch.no_grad():
            out = gen(x)
        ref = upsample_tensor(x, "bilinear")
        assert (out - ref).abs().max() <= 1e-6


def test_init_bilinear_identity_many_instances():
    # randomized sweep: different seeds, channels, sizes
    g = torch.Generator().manual_seed(0)
    for i in range(50):
        c = int(torch.randint(1, 9, (1,), generator=g))
        h = int(torch.randint(1, 7, (1,), generator=g))
        w = int(torch.randint(1, 7, (1,), generator=g))
        gen = init_generator(c, i)
        gen.eval()
        x = torch.rand(1, c, h, w, generator=g)
        with torch.no_grad():
            out = gen(x)
        assert (out - upsample_tensor(x, "bilinear")).abs().max() <= 1e-6


def test_deterministic_init():
    a = init_generator(8, 7)
    b = init_generator(8, 7)
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    c = init_generator(8, 8)
    assert any(
        not torch.equal(pa, pc)
        for pa, pc in zip(a.state_dict().values(), c.state_dict().values())
    )


def test_architecture_counts():
    gen = SrfGenerator(8)
    assert len(gen.blocks) == NUM_RESIDUAL_BLOCKS
    assert torch.count_nonzero(gen.proj.weight) == 0
    assert torch.count_nonzero(gen.proj.bias) == 0


def test_channel_mismatch_rejected():
    gen = SrfGenerator(8)
    with pytest.raises(ValueError, match="channels"):
        gen(torch.rand(1, 4, 4, 4))
    with pytest.raises(ValueError, match="channels"):
        SrfGenerator(0)


def test_generator_forward_wrapper():
    gen = init_generator(4, 0)
    fm = FeatureMap(data=torch.rand(4, 3, 3), level=4)
    out = generator_forward(gen, fm, mode="eval")
    assert out.level == 4
    assert out.data.shape == (4, 6, 6)
    assert not out.data.requires_grad
    with pytest.raises(ValueError, match="mode"):
        generator_forward(gen, fm, mode="predict")


def _randomize_projection(gen, seed):
    # the zero-init projection blocks gradient flow through the conv trunk;
    # gradient tests need it non-zero
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        gen.proj.weight.copy_(torch.randn(gen.proj.weight.shape, generator=g) * 0.1)
        gen.proj.bias.copy_(torch.randn(gen.proj.bias.shape, generator=g) * 0.1)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    gen = init_generator(2, 0).double()
    _randomize_projection(gen, 1)
    gen.eval()  # fixed batch-norm statistics make the map differentiable
    x = torch.rand(1, 2, 3, 3, dtype=torch.float64)

    params = [p for p in gen.parameters() if p.requires_grad]
    out = gen(x).sum()
    grads = torch.autograd.grad(out, params)

    eps = 1e-6
    checked = 0
    for p, g_auto in zip(params, grads):
        flat = p.data.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 3)):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = gen(x).sum().item()
            flat[idx] = orig - eps
            down = gen(x).sum().item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            auto = g_auto.view(-1)[idx].item()
            denom = max(abs(fd), abs(auto), 1e-8)
            assert abs(fd - auto) / denom <= 1e-3, (fd, auto)
            checked += 1
    assert checked >= 20


def test_train_mode_gradient_reaches_all_parameters():
    gen = init_generator(3, 0)
    _randomize_projection(gen, 2)
    gen.train()
    out = gen(torch.rand(2, 3, 4, 4)).pow(2).sum()
    out.backward()
    for name, p in gen.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name
