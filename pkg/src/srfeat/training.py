"""Three-stage progressive training.

Stage 1 adversarially pretrains the super-resolving generator and the patch
discriminator against a frozen target extractor.  Stage 2 embeds the generator
in the top-down pathway of a fresh extractor and trains the whole thing (plus
a detection head) with the integral loss, reusing the stage-1 discriminator.
Stage 3 fine-tunes a target detector with the generator (or the whole stage-2
extractor) swapped in, minimizing the detection loss only.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch.optim import SGD

from .checkpoint import pack_modules, save_checkpoint
from .config import TrainConfig, config_hash
from .data import Dataset, batch_iterator, degrade_image, stack_images
from .discriminator import PatchDiscriminator, init_discriminator
from .errors import NumericalDivergence
from .extractor import FpnExtractor, init_extractor
from .generator import SrfGenerator, init_generator
from .head import DetectionHead, detection_loss, init_head, scale_targets
from .losses import adv_discriminator_loss, srf_loss
from .pyramid import downsample_tensor


def _arch_meta(cfg: TrainConfig) -> dict:
    return {
        "channels": cfg.channels,
        "backbone_widths": list(cfg.backbone_widths),
        "disc_widths": list(cfg.disc_widths),
        "num_classes": cfg.num_classes,
    }


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """base * factor^k where k counts passed milestones (exactly)."""
    k = sum(1 for m in cfg.milestones if m <= iteration)
    return cfg.base_lr * cfg.decay_factor ** k


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(value: torch.Tensor, what: str, iteration: int,
                  last_checkpoint: str | None) -> None:
    if not torch.isfinite(value):
        raise NumericalDivergence(
            f"{what} became non-finite ({float(value.detach())}) at iteration {iteration}; "
            f"last good checkpoint: {last_checkpoint or 'none'}",
            last_checkpoint=last_checkpoint,
        )


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **record):
        self.records.append(record)

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _degraded_batch(items, cfg: TrainConfig) -> torch.Tensor:
    return torch.stack([
        degrade_image(img, cfg.s, cfg.degradation_method).data for img, _ in items
    ])


def train_srf_gan(
    cfg: TrainConfig, target_extractor: FpnExtractor, dataset: Dataset
) -> tuple[SrfGenerator, PatchDiscriminator, TrainLog]:
    """Stage 1: alternating generator/discriminator pretraining."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(cfg.seed)
    gen = init_generator(cfg.channels, cfg.seed)
    disc = init_discriminator(cfg.channels, cfg.seed + 1, cfg.disc_widths)
    target_extractor.eval()

    opt_g = SGD(gen.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay)
    opt_d = SGD(disc.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay)
    batches = batch_iterator(dataset, cfg.batch_size, cfg.seed)
    log = TrainLog()
    ckpt_path = cfg.checkpoint_out or None

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        lr = lr_at(cfg, it)
        _set_lr(opt_g, lr)
        _set_lr(opt_d, lr)
        items = next(batches)
        imgs, _ = stack_images(items)
        lr_imgs = _degraded_batch(items, cfg)
        with torch.no_grad():
            p_tr = target_extractor(imgs)
            p_lr = target_extractor(lr_imgs)
        gen.train()
        disc.train()
        fake = {lvl: gen(p_lr[lvl]) for lvl in p_lr}

        d_total, d_rep = adv_discriminator_loss(disc, p_tr, fake)
        _check_finite(d_total, "discriminator loss", it, ckpt_path)
        opt_d.zero_grad()
        d_total.backward()
        torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
        opt_d.step()

        g_total, g_rep = srf_loss(fake, p_tr, disc, cfg.lam)
        _check_finite(g_total, "generator loss", it, ckpt_path)
        opt_g.zero_grad()
        g_total.backward()
        torch.nn.utils.clip_grad_norm_(gen.parameters(), cfg.grad_clip)
        opt_g.step()

        log.append(
            iter=it, lr=lr,
            l1=g_rep.per_term["l1"], adv_g=g_rep.per_term["adv_g"],
            adv_d_real=d_rep.per_term["adv_d_real"],
            adv_d_fake=d_rep.per_term["adv_d_fake"],
            total_g=g_rep.total, total_d=d_rep.total,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )

    if cfg.checkpoint_out:
        save_checkpoint(
            pack_modules({"generator": gen, "discriminator": disc}),
            {"stage": 1, "upsampler": "srf", "config_hash": config_hash(cfg),
             **_arch_meta(cfg)},
            cfg.checkpoint_out,
        )
    if cfg.log_path:
        log.write(cfg.log_path)
    return gen, disc, log


def train_srf_extractor(
    cfg: TrainConfig,
    target_extractor: FpnExtractor,
    gen0: SrfGenerator,
    disc0: PatchDiscriminator,
    dataset: Dataset,
) -> tuple[FpnExtractor, DetectionHead, PatchDiscriminator, TrainLog]:
    """Stage 2: adversarial training of the super-resolving extractor + head."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(cfg.seed)
    gen = copy.deepcopy(gen0)
    disc = copy.deepcopy(disc0)
    extractor = init_extractor(cfg.channels, cfg.seed + 2, cfg.backbone_widths,
                               "srf", gen)
    head = init_head(cfg.channels, cfg.num_classes, cfg.seed + 3)
    target_extractor.eval()

    m_params = list(extractor.parameters()) + list(head.parameters())
    opt_m = SGD(m_params, lr=cfg.base_lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay)
    opt_d = SGD(disc.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay)
    batches = batch_iterator(dataset, cfg.batch_size, cfg.seed)
    log = TrainLog()
    ckpt_path = cfg.checkpoint_out or None
    mismatched = cfg.semantic_level_mode == "mismatched"

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        lr = lr_at(cfg, it)
        _set_lr(opt_m, lr)
        _set_lr(opt_d, lr)
        items = next(batches)
        imgs, targets = stack_images(items)
        with torch.no_grad():
            p_tr = target_extractor(imgs)
        extractor.train()
        head.train()
        disc.train()

        if mismatched:
            # Same-resolution input to both extractors; each upsampled map is
            # compared against the target one level finer.
            p_sr, upsampled = extractor(imgs, return_upsampled=True)
            sr_cmp = {lvl: t for lvl, t in upsampled.items() if lvl in p_tr}
            tr_cmp = {lvl: p_tr[lvl] for lvl in sr_cmp}
            gt = targets
        else:
            lr_imgs = _degraded_batch(items, cfg)
            p_sr = extractor(lr_imgs)
            sr_cmp = p_sr
            tr_cmp = {lvl: downsample_tensor(p_tr[lvl], cfg.s) for lvl in p_tr}
            gt = [scale_targets(t, cfg.s) for t in targets]

        preds = head({lvl: p_sr[lvl] for lvl in cfg.level_mask})
        l_srf, srf_rep = srf_loss(sr_cmp, tr_cmp, disc, cfg.lam)
        l_det, det_rep = detection_loss(preds, gt)
        total = l_srf + l_det
        _check_finite(total, "integral loss", it, ckpt_path)
        opt_m.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(m_params, cfg.grad_clip)
        opt_m.step()

        d_total, d_rep = adv_discriminator_loss(disc, tr_cmp, sr_cmp)
        _check_finite(d_total, "discriminator loss", it, ckpt_path)
        opt_d.zero_grad()
        d_total.backward()
        torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
        opt_d.step()

        log.append(
            iter=it, lr=lr,
            l1=srf_rep.per_term["l1"], adv_g=srf_rep.per_term["adv_g"],
            det_cls=det_rep.per_term["det_cls"], det_box=det_rep.per_term["det_box"],
            adv_d_real=d_rep.per_term["adv_d_real"],
            adv_d_fake=d_rep.per_term["adv_d_fake"],
            total=float(total.detach()), total_d=d_rep.total,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )

    if cfg.checkpoint_out:
        save_checkpoint(
            pack_modules({"extractor": extractor, "head": head, "discriminator": disc}),
            {"stage": 2, "upsampler": "srf", "config_hash": config_hash(cfg),
             **_arch_meta(cfg)},
            cfg.checkpoint_out,
        )
    if cfg.log_path:
        log.write(cfg.log_path)
    return extractor, head, disc, log


def train_target_detector(
    cfg: TrainConfig,
    dataset: Dataset,
    generator: SrfGenerator | None = None,
    extractor: FpnExtractor | None = None,
    head: DetectionHead | None = None,
) -> tuple[FpnExtractor, DetectionHead, TrainLog]:
    """Stage 3: detector training/fine-tuning on full-resolution images.

    reuse = none: everything fresh (upsampler per config).
    reuse = G:    the given generator is copied in; the extractor is fresh.
    reuse = M:    the given stage-2 extractor (and head) initialize the detector.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(cfg.seed)
    if cfg.reuse == "M":
        if extractor is None:
            raise ValueError("reuse = M needs a stage-2 extractor")
        if extractor.channels != cfg.channels:
            raise ValueError(
                f"stage-2 extractor has {extractor.channels} channels, config wants {cfg.channels}"
            )
        det = copy.deepcopy(extractor)
        det_head = copy.deepcopy(head) if head is not None else init_head(
            cfg.channels, cfg.num_classes, cfg.seed + 3)
    else:
        gen = None
        if cfg.upsampler == "srf":
            if cfg.reuse == "G":
                if generator is None:
                    raise ValueError("reuse = G needs a generator")
                gen = copy.deepcopy(generator)
            else:
                gen = init_generator(cfg.channels, cfg.seed + 1)
        det = init_extractor(cfg.channels, cfg.seed + 2, cfg.backbone_widths,
                             cfg.upsampler, gen)
        det_head = init_head(cfg.channels, cfg.num_classes, cfg.seed + 3)

    if cfg.freeze_generator:
        if det.generator is None:
            raise ValueError("freeze_generator set but the upsampler has no generator")
        for p in det.generator.parameters():
            p.requires_grad_(False)

    params = [p for p in list(det.parameters()) + list(det_head.parameters())
              if p.requires_grad]
    opt = SGD(params, lr=cfg.base_lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    batches = batch_iterator(dataset, cfg.batch_size, cfg.seed)
    log = TrainLog()
    ckpt_path = cfg.checkpoint_out or None

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        lr = lr_at(cfg, it)
        _set_lr(opt, lr)
        items = next(batches)
        imgs, targets = stack_images(items)
        det.train()
        det_head.train()
        if cfg.freeze_generator:
            det.generator.eval()  # frozen: running stats must not drift
        pyr = det(imgs)
        preds = det_head({lvl: pyr[lvl] for lvl in cfg.level_mask})
        total, rep = detection_loss(preds, targets)
        _check_finite(total, "detection loss", it, ckpt_path)
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        log.append(
            iter=it, lr=lr,
            det_cls=rep.per_term["det_cls"], det_box=rep.per_term["det_box"],
            total=rep.total,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )

    if cfg.checkpoint_out:
        save_checkpoint(
            pack_modules({"extractor": det, "head": det_head}),
            {"stage": 3, "upsampler": cfg.upsampler, "config_hash": config_hash(cfg),
             **_arch_meta(cfg)},
            cfg.checkpoint_out,
        )
    if cfg.log_path:
        log.write(cfg.log_path)
    return det, det_head, log
