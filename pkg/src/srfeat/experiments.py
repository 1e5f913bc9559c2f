"""Experiment protocols: progressive-learning ablations (A1..A5), interpolation
comparison, semantic-level-matching and degradation suites.

Every protocol runs on the synthetic dataset at a configurable scale; the
default `ExperimentScale` keeps each training run to seconds on one CPU core.
The A1 baseline detector doubles as the frozen target extractor for the later
stages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .config import TrainConfig, config_hash, default_config
from .data import Dataset, generate_synthetic
from .evaluation import (EvalReport, evaluate_detector, extractor_feature_l1,
                         feature_l1_eval)
from .training import train_srf_gan, train_srf_extractor, train_target_detector

# Reference full-scale box/mask AP figures from the original study, quoted in
# report footers for context only; nothing here asserts them.
REFERENCE_FOOTER = (
    "reference (original full-scale study, not reproduced at this scale): "
    "box/mask AP nearest 38.6/35.2 vs learned upsampler 41.2/37.0"
)


@dataclass(frozen=True)
class ExperimentScale:
    """Knobs for desk-scale runs; defaults are the CI toy scale."""

    channels: int = 32
    backbone_widths: tuple[int, ...] = (8, 16, 32, 32)
    disc_widths: tuple[int, ...] = (32, 64, 64)
    image_size: int = 64
    num_images: int = 120
    holdout_images: int = 40
    batch_size: int = 8
    iters_stage1: int = 400
    iters_stage2: int = 250
    iters_stage3: int = 350
    lr_stage1: float = 0.001
    lr_stage2: float = 0.02
    lr_stage3: float = 0.01
    num_classes: int = 3


def make_datasets(scale: ExperimentScale, seed: int) -> tuple[Dataset, Dataset]:
    train = generate_synthetic(scale.num_images, scale.image_size, seed)
    holdout = generate_synthetic(scale.holdout_images, scale.image_size,
                                 seed + 9973, split="val")
    return train, holdout


def stage_cfg(scale: ExperimentScale, stage: int, seed: int, **overrides) -> TrainConfig:
    iters = {1: scale.iters_stage1, 2: scale.iters_stage2, 3: scale.iters_stage3}[stage]
    lr = {1: scale.lr_stage1, 2: scale.lr_stage2, 3: scale.lr_stage3}[stage]
    milestones = (int(iters * 0.8),) if stage == 1 else (
        int(iters * 0.78), int(iters * 0.93))
    updates = dict(
        seed=seed, iterations=iters, base_lr=lr, milestones=milestones,
        channels=scale.channels, backbone_widths=scale.backbone_widths,
        disc_widths=scale.disc_widths, batch_size=scale.batch_size,
        num_images=scale.num_images, image_size=scale.image_size,
        holdout_images=scale.holdout_images, num_classes=scale.num_classes,
    )
    updates.update(overrides)
    if "iterations" in overrides and "milestones" not in overrides:
        it = overrides["iterations"]
        updates["milestones"] = (int(it * 0.8),) if stage == 1 else (
            int(it * 0.78), int(it * 0.93))
    return replace(default_config(stage), **updates)


def train_baseline(scale: ExperimentScale, seed: int, train: Dataset,
                   upsampler: str = "nearest"):
    """Train the A1-style baseline detector; its extractor serves as frozen F."""
    cfg = stage_cfg(scale, 3, seed, upsampler=upsampler, reuse="none")
    ext, head, _ = train_target_detector(cfg, train)
    return ext, head, cfg


def run_stage1(scale: ExperimentScale, seed: int, train: Dataset,
               f_ext) -> tuple:
    """Stage-1 pretraining against a frozen target extractor."""
    cfg1 = stage_cfg(scale, 1, seed)
    gen1, disc1, _ = train_srf_gan(cfg1, f_ext, train)
    return gen1, disc1


def run_progressive_suite(scale: ExperimentScale, seed: int,
                          train: Dataset | None = None,
                          holdout: Dataset | None = None,
                          base=None) -> dict[str, float]:
    """Full A1..A5 protocol for one seed; returns toy AP per variant.

    `base` optionally carries precomputed (f_ext, a1_head, gen1, disc1) so
    repeated protocols can share the baseline and stage-1 artifacts.
    """
    if train is None or holdout is None:
        train, holdout = make_datasets(scale, seed)

    if base is None:
        f_ext, a1_head, _cfg = train_baseline(scale, seed, train)
        gen1, disc1 = run_stage1(scale, seed, train, f_ext)
    else:
        f_ext, a1_head, gen1, disc1 = base
    a1_cfg = stage_cfg(scale, 3, seed, upsampler="nearest", reuse="none")
    ap = {}
    ap["A1"] = evaluate_detector(f_ext, a1_head, holdout, seed=seed,
                                 config_hash=config_hash(a1_cfg)).ap["ap"]

    # A2: detector with the pretrained generator only.
    cfg_a2 = stage_cfg(scale, 3, seed, upsampler="srf", reuse="G")
    a2_ext, a2_head, _ = train_target_detector(cfg_a2, train, generator=gen1)
    ap["A2"] = evaluate_detector(a2_ext, a2_head, holdout, seed=seed,
                                 config_hash=config_hash(cfg_a2)).ap["ap"]

    # Stage 2: super-resolving extractor.
    cfg2 = stage_cfg(scale, 2, seed, upsampler="srf")
    m_ext, m_head, _disc2, _ = train_srf_extractor(cfg2, f_ext, gen1, disc1, train)

    # A3: the stage-2 extractor evaluated directly on full-resolution images.
    ap["A3"] = evaluate_detector(m_ext, m_head, holdout, seed=seed,
                                 config_hash=config_hash(cfg2)).ap["ap"]

    # A4: fine-tune with the stage-2 generator reused and frozen.
    cfg_a4 = stage_cfg(scale, 3, seed, upsampler="srf", reuse="G",
                       freeze_generator=True)
    a4_ext, a4_head, _ = train_target_detector(cfg_a4, train,
                                               generator=m_ext.generator)
    ap["A4"] = evaluate_detector(a4_ext, a4_head, holdout, seed=seed,
                                 config_hash=config_hash(cfg_a4)).ap["ap"]

    # A5: fine-tune the whole stage-2 extractor.
    cfg_a5 = stage_cfg(scale, 3, seed, upsampler="srf", reuse="M")
    a5_ext, a5_head, _ = train_target_detector(cfg_a5, train,
                                               extractor=m_ext, head=m_head)
    ap["A5"] = evaluate_detector(a5_ext, a5_head, holdout, seed=seed,
                                 config_hash=config_hash(cfg_a5)).ap["ap"]
    return ap


def run_interpolation_comparison(scale: ExperimentScale, seed: int,
                                 train: Dataset | None = None,
                                 holdout: Dataset | None = None,
                                 base=None) -> dict[str, dict]:
    """One row per upsampling method: held-out per-level feature L1 + toy AP."""
    if train is None or holdout is None:
        train, holdout = make_datasets(scale, seed)
    if base is None:
        f_ext, a1_head, _cfg = train_baseline(scale, seed, train)
        gen1, _disc1 = run_stage1(scale, seed, train, f_ext)
    else:
        f_ext, a1_head, gen1, _disc1 = base

    rows: dict[str, dict] = {}
    for method in ("nearest", "bilinear", "bicubic"):
        l1 = feature_l1_eval(method, f_ext, holdout, seed=seed).per_level_l1
        if method == "nearest":
            ext, head = f_ext, a1_head
        else:
            cfg = stage_cfg(scale, 3, seed, upsampler=method, reuse="none")
            ext, head, _ = train_target_detector(cfg, train)
        rows[method] = {
            "feature_l1": l1,
            "ap": evaluate_detector(ext, head, holdout, seed=seed).ap["ap"],
        }
    # the learned upsampler enters the comparison as a fixed operation, like
    # the interpolation kernels it is compared against
    cfg_srf = stage_cfg(scale, 3, seed, upsampler="srf", reuse="G",
                        freeze_generator=True)
    srf_ext, srf_head, _ = train_target_detector(cfg_srf, train, generator=gen1)
    rows["srf"] = {
        "feature_l1": feature_l1_eval(gen1, f_ext, holdout, seed=seed).per_level_l1,
        "ap": evaluate_detector(srf_ext, srf_head, holdout, seed=seed).ap["ap"],
    }
    return rows


def run_semantic_level_suite(scale: ExperimentScale, seed: int,
                             train: Dataset | None = None,
                             holdout: Dataset | None = None,
                             base=None) -> dict[str, float]:
    """Matched vs mismatched level comparison during stage 2; returns the
    held-out (matched-construction) feature L1 summed over levels."""
    if train is None or holdout is None:
        train, holdout = make_datasets(scale, seed)
    if base is None:
        f_ext, _head, _cfg = train_baseline(scale, seed, train)
        gen1, disc1 = run_stage1(scale, seed, train, f_ext)
    else:
        f_ext, _head, gen1, disc1 = base
    out = {}
    for mode in ("matched", "mismatched"):
        cfg2 = stage_cfg(scale, 2, seed, upsampler="srf", semantic_level_mode=mode)
        m_ext, _m_head, _d, _ = train_srf_extractor(cfg2, f_ext, gen1, disc1, train)
        per_level = extractor_feature_l1(m_ext, f_ext, holdout)
        out[mode] = sum(per_level.values())
    return out


def run_degradation_suite(scale: ExperimentScale, seed: int,
                          train: Dataset | None = None,
                          holdout: Dataset | None = None,
                          f_ext=None) -> dict[str, float]:
    """Stage-1 training under each degradation function; returns final held-out
    feature L1 (summed over levels), each evaluated with its own degradation."""
    if train is None or holdout is None:
        train, holdout = make_datasets(scale, seed)
    if f_ext is None:
        f_ext, _head, _cfg = train_baseline(scale, seed, train)
    out = {}
    for method in ("nearest", "bilinear", "bicubic"):
        cfg1 = stage_cfg(scale, 1, seed, degradation_method=method)
        gen, _disc, _ = train_srf_gan(cfg1, f_ext, train)
        per_level = feature_l1_eval(gen, f_ext, holdout, degradation=method,
                                    seed=seed).per_level_l1
        out[method] = sum(per_level.values())
    return out


def format_table(rows: dict[str, dict], columns: list[str]) -> str:
    """Aligned text table from {row: {column: value}}."""
    header = ["method"] + columns
    lines = [header]
    for name, row in rows.items():
        lines.append([name] + [_fmt(row.get(c)) for c in columns])
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    out = []
    for i, line in enumerate(lines):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)))
        if i == 0:
            out.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    return "\n".join(out)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, dict):
        return " ".join(f"P{k}:{v:.4f}" for k, v in sorted(value.items()))
    return str(value)


def write_report(payload: dict, out_dir: str | Path, name: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path
