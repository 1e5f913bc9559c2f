"""Loss arithmetic against scalar-loop oracles, equilibrium values, and
finite-difference gradient checks through tiny generator/discriminator stacks."""

import math

import pytest
import torch

from srfeat.discriminator import init_discriminator
from srfeat.generator import init_generator
from srfeat.losses import (adv_discriminator_loss, adv_generator_loss,
                           integral_loss, l1_feature_loss, srf_loss)

LN2 = math.log(2.0)


class ConstD:
    """Stand-in discriminator emitting a constant probability map."""

    def __init__(self, value: float):
        self.value = value

    def __call__(self, x):
        return torch.full((x.shape[0], 1, x.shape[-2], x.shape[-1]), self.value,
                          dtype=x.dtype)


# ---------------------------------------------------------------------------
# scalar-loop oracles
# ---------------------------------------------------------------------------

def l1_oracle(sr: dict, tg: dict) -> float:
    total = 0.0
    for lvl in sr:
        a = sr[lvl].reshape(-1).tolist()
        b = tg[lvl].reshape(-1).tolist()
        total += sum(abs(x - y) for x, y in zip(a, b)) / len(a)
    return total


def adv_g_oracle(d_value: float, num_levels: int) -> float:
    return num_levels * -math.log(max(d_value, 1e-12))


def adv_d_oracle(d_real: float, d_fake: float, num_levels: int) -> float:
    return num_levels * (
        -math.log(max(d_real, 1e-12)) - math.log(max(1.0 - d_fake, 1e-12))
    )


# ---------------------------------------------------------------------------
# value oracles
# ---------------------------------------------------------------------------

def test_l1_identical_pyramids_zero():
    p = {2: torch.rand(1, 3, 4, 4)}
    total, rep = l1_feature_loss(p, {2: p[2].clone()})
    assert float(total) == 0.0
    assert rep.total == 0.0


def test_l1_single_scalar_example():
    total, _ = l1_feature_loss({2: torch.tensor([[[[1.0]]]])},
                               {2: torch.tensor([[[[3.0]]]])})
    assert abs(float(total) - 2.0) <= 1e-6


def test_l1_two_levels_sum_not_mean():
    # per-level means 2.0 and 4.0 must sum to 6.0
    sr = {2: torch.zeros(1, 1, 2, 2), 3: torch.zeros(1, 1, 1, 1)}
    tg = {2: torch.full((1, 1, 2, 2), 2.0), 3: torch.full((1, 1, 1, 1), 4.0)}
    total, rep = l1_feature_loss(sr, tg)
    assert abs(float(total) - 6.0) <= 1e-6
    assert abs(rep.per_level[2]["l1"] - 2.0) <= 1e-6
    assert abs(rep.per_level[3]["l1"] - 4.0) <= 1e-6


def test_l1_random_matches_scalar_loop():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        sr = {lvl: torch.rand(1, 2, 3, 3, generator=g, dtype=torch.float64)
              for lvl in (2, 3, 4)}
        tg = {lvl: torch.rand(1, 2, 3, 3, generator=g, dtype=torch.float64)
              for lvl in (2, 3, 4)}
        total, _ = l1_feature_loss(sr, tg)
        assert abs(float(total) - l1_oracle(sr, tg)) <= 1e-6


def test_l1_shape_and_level_mismatch():
    with pytest.raises(ValueError, match="level"):
        l1_feature_loss({2: torch.rand(1, 1, 2, 2)}, {3: torch.rand(1, 1, 2, 2)})
    with pytest.raises(ValueError, match="level 2"):
        l1_feature_loss({2: torch.rand(1, 1, 2, 2)}, {2: torch.rand(1, 1, 3, 3)})


def test_adv_generator_values():
    p1 = {2: torch.rand(1, 4, 3, 3)}
    p2 = {2: torch.rand(1, 4, 3, 3), 3: torch.rand(1, 4, 2, 2)}
    total, _ = adv_generator_loss(ConstD(1.0), p1)
    assert abs(float(total)) <= 1e-6
    total, _ = adv_generator_loss(ConstD(0.5), p1)
    assert abs(float(total) - LN2) <= 1e-6
    assert abs(float(total) - adv_g_oracle(0.5, 1)) <= 1e-6
    total, _ = adv_generator_loss(ConstD(0.5), p2)
    assert abs(float(total) - 2 * LN2) <= 1e-6


def test_adv_discriminator_values():
    p1 = {2: torch.rand(1, 4, 3, 3)}
    p2 = {2: torch.rand(1, 4, 3, 3), 3: torch.rand(1, 4, 2, 2)}

    class TwoSided:
        def __init__(self, for_real, for_fake):
            self.vals = [for_real, for_fake]
            self.calls = 0

        def __call__(self, x):
            v = self.vals[self.calls % 2]
            self.calls += 1
            return torch.full((x.shape[0], 1, *x.shape[-2:]), v)

    eps = 1e-6
    total, _ = adv_discriminator_loss(TwoSided(1 - eps, eps), p1, p1)
    assert abs(float(total)) <= 1e-5
    total, _ = adv_discriminator_loss(ConstD(0.5), p1, p1)
    assert abs(float(total) - 2 * LN2) <= 1e-6
    assert abs(float(total) - adv_d_oracle(0.5, 0.5, 1)) <= 1e-6
    total, _ = adv_discriminator_loss(ConstD(0.5), p2, p2)
    assert abs(float(total) - 4 * LN2) <= 1e-6


def test_equilibrium_sum_three_ln2_per_level():
    p = {2: torch.rand(1, 4, 3, 3)}
    g, _ = adv_generator_loss(ConstD(0.5), p)
    d, _ = adv_discriminator_loss(ConstD(0.5), p, p)
    assert abs(float(g) + float(d) - 3 * LN2) <= 1e-6


def test_srf_loss_lambda_weighting():
    # L1 = 2.0 and adv = ln 2 must combine to 2.000693...
    sr = {2: torch.tensor([[[[1.0]]]])}
    tg = {2: torch.tensor([[[[3.0]]]])}
    total, rep = srf_loss(sr, tg, ConstD(0.5), lam=0.001)
    assert abs(float(total) - (2.0 + 0.001 * LN2)) <= 1e-6
    assert abs(float(total) - 2.000693) <= 1e-5
    assert rep.lam == 0.001
    # report total must be reconstructable from its terms
    assert abs(rep.total - (rep.per_term["l1"] + 0.001 * rep.per_term["adv_g"])) <= 1e-6


def test_srf_loss_lambda_zero_is_pure_l1():
    sr = {2: torch.rand(1, 2, 3, 3)}
    tg = {2: torch.rand(1, 2, 3, 3)}
    total, _ = srf_loss(sr, tg, ConstD(0.5), lam=0.0)
    l1, _ = l1_feature_loss(sr, tg)
    assert abs(float(total) - float(l1)) <= 1e-7


def test_srf_loss_monotone_in_lambda():
    sr = {2: torch.rand(1, 2, 3, 3)}
    tg = {2: torch.rand(1, 2, 3, 3)}
    vals = [float(srf_loss(sr, tg, ConstD(0.5), lam=lam)[0])
            for lam in (0.0, 0.001, 0.01, 0.1)]
    assert vals == sorted(vals)


def test_srf_loss_zero_at_perfection():
    p = {2: torch.rand(1, 2, 3, 3)}
    total, _ = srf_loss(p, {2: p[2].clone()}, ConstD(1.0), lam=0.001)
    assert abs(float(total)) <= 1e-7


def test_channel_permutation_invariance():
    g = torch.Generator().manual_seed(3)
    sr = {2: torch.rand(1, 5, 4, 4, generator=g)}
    tg = {2: torch.rand(1, 5, 4, 4, generator=g)}
    perm = torch.randperm(5, generator=g)
    a, _ = l1_feature_loss(sr, tg)
    b, _ = l1_feature_loss({2: sr[2][:, perm]}, {2: tg[2][:, perm]})
    assert abs(float(a) - float(b)) <= 1e-6


def test_log_clamp_keeps_losses_finite():
    p = {2: torch.rand(1, 2, 3, 3)}
    total, _ = adv_generator_loss(ConstD(0.0), p)
    assert torch.isfinite(total)
    total, _ = adv_discriminator_loss(ConstD(1.0), p, p)
    assert torch.isfinite(total)


def test_discriminator_inputs_detached():
    disc = init_discriminator(2, 0, widths=(4, 4, 4))
    x = torch.rand(1, 2, 3, 3, requires_grad=True)
    total, _ = adv_discriminator_loss(disc, {2: x * 2}, {2: x + 1})
    total.backward()
    assert x.grad is None or torch.count_nonzero(x.grad) == 0


def test_integral_loss():
    assert integral_loss(0.0, 0.0) == 0.0
    assert abs(integral_loss(2.0007, 1.5) - 3.5007) <= 1e-9
    with pytest.raises(FloatingPointError, match="non-finite"):
        integral_loss(float("nan"), 1.0)
    with pytest.raises(FloatingPointError, match="non-finite"):
        integral_loss(1.0, float("inf"))


# ---------------------------------------------------------------------------
# finite-difference gradient checks (fp64, eval-mode batch norm)
# ---------------------------------------------------------------------------

def _fd_check(params, loss_fn, rtol=1e-3, eps=1e-6, stride=7):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    checked = 0
    for p, g_auto in zip(params, grads):
        if g_auto is None:
            continue
        flat = p.data.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // stride)):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = float(loss_fn().detach())
            flat[idx] = orig - eps
            down = float(loss_fn().detach())
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            auto = g_auto.view(-1)[idx].item()
            denom = max(abs(fd), abs(auto), 1e-6)
            assert abs(fd - auto) / denom <= rtol, (fd, auto)
            checked += 1
    assert checked >= 10


def _tiny_gen():
    gen = init_generator(2, 0).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        gen.proj.weight.copy_(torch.randn(gen.proj.weight.shape, generator=g,
                                          dtype=torch.float64) * 0.1)
        gen.proj.bias.copy_(torch.randn(gen.proj.bias.shape, generator=g,
                                        dtype=torch.float64) * 0.1)
    gen.eval()
    return gen


def _tiny_disc(seed=0):
    disc = init_discriminator(2, seed, widths=(3, 3, 3)).double()
    disc.eval()
    return disc


def test_fd_srf_loss_through_generator():
    torch.manual_seed(0)
    gen = _tiny_gen()
    disc = _tiny_disc()
    x = {2: torch.rand(1, 2, 2, 2, dtype=torch.float64)}
    tg = {2: torch.rand(1, 2, 4, 4, dtype=torch.float64)}
    params = [p for p in gen.parameters() if p.requires_grad]

    def loss_fn():
        sr = {2: gen(x[2])}
        total, _ = srf_loss(sr, tg, disc, lam=0.5)
        return total

    _fd_check(params, loss_fn)


def test_fd_adv_discriminator_loss_through_discriminator():
    torch.manual_seed(0)
    disc = _tiny_disc()
    real = {2: torch.rand(1, 2, 3, 3, dtype=torch.float64),
            3: torch.rand(1, 2, 2, 2, dtype=torch.float64)}
    fake = {2: torch.rand(1, 2, 3, 3, dtype=torch.float64),
            3: torch.rand(1, 2, 2, 2, dtype=torch.float64)}
    params = list(disc.parameters())

    def loss_fn():
        total, _ = adv_discriminator_loss(disc, real, fake)
        return total

    _fd_check(params, loss_fn)


def test_fd_l1_with_downscaled_targets():
    # stage-2 shape variant: targets at floor(s*H) sizes
    torch.manual_seed(0)
    from srfeat.pyramid import downsample_tensor
    gen = _tiny_gen()
    x = {2: torch.rand(1, 2, 2, 2, dtype=torch.float64)}
    full = torch.rand(1, 2, 9, 9, dtype=torch.float64)
    tg = {2: downsample_tensor(full, 4.0 / 9.0)}
    params = [p for p in gen.parameters() if p.requires_grad]

    def loss_fn():
        total, _ = l1_feature_loss({2: gen(x[2])}, tg)
        return total

    _fd_check(params, loss_fn)
