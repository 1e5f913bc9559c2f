"""Loss terms: per-level L1 reconstruction, adversarial generator/discriminator
objectives, their lambda-weighted combination, and the integral (feature +
detection) sum.

All pyramid losses aggregate levels by SUM, and each level's term is a mean
over its own channels/positions (and over the batch when inputs are batched).
Logs of discriminator probabilities are clamped below at 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .discriminator import PatchDiscriminator
from .pyramid import FeaturePyramid

LOG_CLAMP = 1e-12
DEFAULT_LAMBDA = 0.001


@dataclass
class LossReport:
    """Per-term, per-level scalar breakdown of a composite loss."""

    total: float
    per_term: dict[str, float] = field(default_factory=dict)
    per_level: dict[int, dict[str, float]] = field(default_factory=dict)
    lam: float = 0.0

    def to_record(self) -> dict:
        return {
            "total": self.total,
            "per_term": dict(self.per_term),
            "per_level": {str(k): dict(v) for k, v in self.per_level.items()},
            "lambda": self.lam,
        }


def _as_tensors(pyr) -> dict[int, torch.Tensor]:
    """Accept a FeaturePyramid or a plain {level: tensor} dict; yield 4D tensors."""
    if isinstance(pyr, FeaturePyramid):
        items = {lvl: fm.data for lvl, fm in pyr.items()}
    else:
        items = dict(pyr)
    out = {}
    for lvl, t in sorted(items.items()):
        out[lvl] = t.unsqueeze(0) if t.dim() == 3 else t
    return out


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_CLAMP))


def _f(t) -> float:
    """Scalar for reporting, detached from any autograd graph."""
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def l1_feature_loss(sr, target) -> tuple[torch.Tensor, LossReport]:
    """Sum over levels of the mean absolute difference per level."""
    sr_t, tg_t = _as_tensors(sr), _as_tensors(target)
    if sr_t.keys() != tg_t.keys():
        raise ValueError(
            f"level ranges differ: {sorted(sr_t)} vs {sorted(tg_t)}"
        )
    total = None
    per_level = {}
    for lvl in sr_t:
        a, b = sr_t[lvl], tg_t[lvl]
        if a.shape != b.shape:
            raise ValueError(
                f"shape mismatch at level {lvl}: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
        term = (a - b).abs().mean()
        per_level[lvl] = {"l1": _f(term)}
        total = term if total is None else total + term
    report = LossReport(total=_f(total), per_term={"l1": _f(total)}, per_level=per_level)
    return total, report


def adv_generator_loss(disc: PatchDiscriminator, sr) -> tuple[torch.Tensor, LossReport]:
    """Non-saturating generator term: sum over levels of mean -log D(sr)."""
    sr_t = _as_tensors(sr)
    total = None
    per_level = {}
    for lvl, t in sr_t.items():
        term = (-_safe_log(disc(t))).mean()
        per_level[lvl] = {"adv_g": _f(term)}
        total = term if total is None else total + term
    report = LossReport(total=_f(total), per_term={"adv_g": _f(total)}, per_level=per_level)
    return total, report


def adv_discriminator_loss(disc: PatchDiscriminator, real, fake) -> tuple[torch.Tensor, LossReport]:
    """Discriminator objective (minimized): -E log D(real) - E log(1 - D(fake)).

    Both inputs are detached here; gradients flow into D only.
    """
    real_t, fake_t = _as_tensors(real), _as_tensors(fake)
    if real_t.keys() != fake_t.keys():
        raise ValueError(
            f"level ranges differ: {sorted(real_t)} vs {sorted(fake_t)}"
        )
    total = None
    per_level = {}
    real_sum = fake_sum = 0.0
    for lvl in real_t:
        d_real = disc(real_t[lvl].detach())
        d_fake = disc(fake_t[lvl].detach())
        term_real = (-_safe_log(d_real)).mean()
        term_fake = (-torch.log((1.0 - d_fake).clamp_min(LOG_CLAMP))).mean()
        per_level[lvl] = {"adv_d_real": _f(term_real), "adv_d_fake": _f(term_fake)}
        real_sum += _f(term_real)
        fake_sum += _f(term_fake)
        term = term_real + term_fake
        total = term if total is None else total + term
    report = LossReport(
        total=_f(total),
        per_term={"adv_d_real": real_sum, "adv_d_fake": fake_sum},
        per_level=per_level,
    )
    return total, report


def srf_loss(sr, target, disc: PatchDiscriminator, lam: float = DEFAULT_LAMBDA
             ) -> tuple[torch.Tensor, LossReport]:
    """L1 reconstruction plus lambda-weighted adversarial generator term."""
    l1, l1_rep = l1_feature_loss(sr, target)
    adv, adv_rep = adv_generator_loss(disc, sr)
    total = l1 + lam * adv
    per_level = {}
    for lvl in l1_rep.per_level:
        per_level[lvl] = {**l1_rep.per_level[lvl], **adv_rep.per_level[lvl]}
    report = LossReport(
        total=_f(total),
        per_term={"l1": l1_rep.per_term["l1"], "adv_g": adv_rep.per_term["adv_g"]},
        per_level=per_level,
        lam=lam,
    )
    return total, report


def integral_loss(srf: torch.Tensor | float, det: torch.Tensor | float):
    """Unweighted sum of the feature loss and the detection loss."""
    for name, v in (("srf", srf), ("det", det)):
        val = _f(v)
        if val != val or val in (float("inf"), float("-inf")):
            raise FloatingPointError(f"{name} loss is non-finite: {val}")
    return srf + det
