"""Command-line entry point.

Subcommands: pretrain-gan, train-extractor, train-detector, eval,
compare-interp, ablate, viz, make-synthetic.  Common flags: --config PATH,
--seed N, --out DIR, --set key=value (repeatable).  Exit codes: 0 success,
1 validation error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, unpack_into
from .config import (TrainConfig, apply_overrides, config_hash, default_config,
                     load_config)
from .data import Dataset, generate_synthetic, load_dataset, save_dataset
from .discriminator import PatchDiscriminator
from .errors import CheckpointError, ConfigError, NumericalDivergence
from .evaluation import evaluate_detector, visualize_feature
from .experiments import (ExperimentScale, REFERENCE_FOOTER, format_table,
                          run_degradation_suite, run_interpolation_comparison,
                          run_progressive_suite, run_semantic_level_suite,
                          write_report)
from .extractor import FpnExtractor, extract_pyramid
from .generator import SrfGenerator
from .head import DetectionHead
from .pyramid import Image
from .training import (train_srf_gan, train_srf_extractor,
                       train_target_detector)


def _build_config(args, stage: int | None = None) -> TrainConfig:
    cfg = default_config(stage) if stage else TrainConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _dataset_for(cfg: TrainConfig, split: str = "train") -> Dataset:
    if cfg.dataset == "synthetic":
        if split == "train":
            return generate_synthetic(cfg.num_images, cfg.image_size, cfg.seed)
        return generate_synthetic(cfg.holdout_images, cfg.image_size,
                                  cfg.seed + 9973, split="val")
    if not cfg.annotations:
        raise ConfigError("dataset directory given but 'annotations' is unset")
    return load_dataset(cfg.dataset, cfg.annotations, split=split)


def _load_modules(path: str):
    """Load checkpoint tensors + metadata and rebuild the stored modules."""
    tensors, meta = load_checkpoint(path)
    channels = meta["channels"]
    widths = tuple(meta["backbone_widths"])
    disc_widths = tuple(meta["disc_widths"])
    out = {"meta": meta}
    if any(k.startswith("generator.") for k in tensors):
        gen = SrfGenerator(channels)
        unpack_into(tensors, "generator", gen)
        out["generator"] = gen
    if any(k.startswith("discriminator.") for k in tensors):
        disc = PatchDiscriminator(channels, disc_widths)
        unpack_into(tensors, "discriminator", disc)
        out["discriminator"] = disc
    if any(k.startswith("extractor.") for k in tensors):
        upsampler = meta.get("upsampler", "nearest")
        gen = SrfGenerator(channels) if upsampler == "srf" else None
        ext = FpnExtractor(channels, widths, upsampler, gen)
        unpack_into(tensors, "extractor", ext)
        out["extractor"] = ext
        if upsampler == "srf":
            out["generator"] = ext.generator
    if any(k.startswith("head.") for k in tensors):
        head = DetectionHead(channels, meta["num_classes"])
        unpack_into(tensors, "head", head)
        out["head"] = head
    return out


def _target_extractor(cfg: TrainConfig, dataset: Dataset) -> FpnExtractor:
    """The frozen target extractor: loaded from target_checkpoint, or trained
    inline as a baseline detector when none is given."""
    if cfg.target_checkpoint:
        loaded = _load_modules(cfg.target_checkpoint)
        if "extractor" not in loaded:
            raise CheckpointError(
                f"{cfg.target_checkpoint} holds no extractor tensors"
            )
        return loaded["extractor"]
    base_cfg = replace(default_config(3), seed=cfg.seed, channels=cfg.channels,
                       backbone_widths=cfg.backbone_widths,
                       disc_widths=cfg.disc_widths, batch_size=cfg.batch_size,
                       num_classes=cfg.num_classes, upsampler="nearest",
                       iterations=max(200, cfg.iterations // 4))
    ext, _head, _log = train_target_detector(base_cfg, dataset)
    return ext


def _scale_from(cfg: TrainConfig) -> ExperimentScale:
    return ExperimentScale(
        channels=cfg.channels, backbone_widths=cfg.backbone_widths,
        disc_widths=cfg.disc_widths, image_size=cfg.image_size,
        num_images=cfg.num_images, holdout_images=cfg.holdout_images,
        batch_size=cfg.batch_size, num_classes=cfg.num_classes,
    )


def _out_path(args, default_name: str) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out / default_name


def cmd_make_synthetic(args) -> int:
    cfg = _build_config(args)
    ds = generate_synthetic(cfg.num_images, cfg.image_size, cfg.seed)
    root = Path(args.out or "synthetic")
    ann = save_dataset(ds, root)
    print(f"wrote {len(ds)} images under {root} (annotations: {ann})")
    return 0


def cmd_pretrain_gan(args) -> int:
    cfg = _build_config(args, stage=1)
    if not cfg.checkpoint_out:
        cfg = replace(cfg, checkpoint_out=str(_out_path(args, "stage1.ckpt")))
    if not cfg.log_path:
        cfg = replace(cfg, log_path=str(_out_path(args, "stage1.log.jsonl")))
    train = _dataset_for(cfg)
    f_ext = _target_extractor(cfg, train)
    _gen, _disc, log = train_srf_gan(cfg, f_ext, train)
    print(f"stage 1 done: {len(log.records)} iterations, "
          f"final l1 {log.records[-1]['l1']:.4f} -> {cfg.checkpoint_out}")
    return 0


def cmd_train_extractor(args) -> int:
    cfg = _build_config(args, stage=2)
    if not cfg.checkpoint_in:
        raise ConfigError("train-extractor needs checkpoint_in (stage-1 output)")
    if not cfg.checkpoint_out:
        cfg = replace(cfg, checkpoint_out=str(_out_path(args, "stage2.ckpt")))
    if not cfg.log_path:
        cfg = replace(cfg, log_path=str(_out_path(args, "stage2.log.jsonl")))
    loaded = _load_modules(cfg.checkpoint_in)
    if "generator" not in loaded or "discriminator" not in loaded:
        raise CheckpointError(f"{cfg.checkpoint_in} is not a stage-1 checkpoint")
    train = _dataset_for(cfg)
    f_ext = _target_extractor(cfg, train)
    _m, _head, _disc, log = train_srf_extractor(
        cfg, f_ext, loaded["generator"], loaded["discriminator"], train)
    print(f"stage 2 done: {len(log.records)} iterations -> {cfg.checkpoint_out}")
    return 0


def cmd_train_detector(args) -> int:
    cfg = _build_config(args, stage=3)
    if not cfg.checkpoint_out:
        cfg = replace(cfg, checkpoint_out=str(_out_path(args, "detector.ckpt")))
    if not cfg.log_path:
        cfg = replace(cfg, log_path=str(_out_path(args, "detector.log.jsonl")))
    generator = extractor = head = None
    if cfg.reuse != "none":
        if not cfg.checkpoint_in:
            raise ConfigError(f"reuse = {cfg.reuse} needs checkpoint_in")
        loaded = _load_modules(cfg.checkpoint_in)
        if cfg.reuse == "G":
            if "generator" not in loaded:
                raise CheckpointError(f"{cfg.checkpoint_in} holds no generator tensors")
            generator = loaded["generator"]
        else:
            if "extractor" not in loaded:
                raise CheckpointError(f"{cfg.checkpoint_in} holds no extractor tensors")
            extractor = loaded["extractor"]
            head = loaded.get("head")
    train = _dataset_for(cfg)
    _det, _head, log = train_target_detector(
        cfg, train, generator=generator, extractor=extractor, head=head)
    print(f"stage 3 done: {len(log.records)} iterations -> {cfg.checkpoint_out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    if not cfg.checkpoint_in:
        raise ConfigError("eval needs checkpoint_in (a detector checkpoint)")
    loaded = _load_modules(cfg.checkpoint_in)
    if "extractor" not in loaded or "head" not in loaded:
        raise CheckpointError(f"{cfg.checkpoint_in} is not a detector checkpoint")
    holdout = _dataset_for(cfg, split="val")
    report = evaluate_detector(
        loaded["extractor"], loaded["head"], holdout,
        score_threshold=cfg.score_threshold, nms_iou=cfg.nms_iou,
        level_mask=cfg.level_mask, config_hash=config_hash(cfg), seed=cfg.seed)
    path = _out_path(args, "eval_report.json")
    path.write_text(report.to_json() + "\n")
    print(report.to_json())
    print(f"report -> {path}")
    return 0


def cmd_compare_interp(args) -> int:
    cfg = _build_config(args)
    rows = run_interpolation_comparison(_scale_from(cfg), cfg.seed)
    table = format_table(rows, ["feature_l1", "ap"])
    print(table)
    print(REFERENCE_FOOTER)
    path = write_report(
        {"rows": rows, "footer": REFERENCE_FOOTER, "seed": cfg.seed,
         "config_hash": config_hash(cfg)},
        args.out or ".", "compare_interp")
    print(f"report -> {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    scale = _scale_from(cfg)
    if args.protocol == "progressive":
        result = run_progressive_suite(scale, cfg.seed)
        print(format_table({k: {"ap": v} for k, v in result.items()}, ["ap"]))
    elif args.protocol == "semantic_level":
        result = run_semantic_level_suite(scale, cfg.seed)
        print(format_table({k: {"holdout_l1": v} for k, v in result.items()},
                           ["holdout_l1"]))
    elif args.protocol == "degradation":
        result = run_degradation_suite(scale, cfg.seed)
        print(format_table({k: {"holdout_l1": v} for k, v in result.items()},
                           ["holdout_l1"]))
    else:
        raise ConfigError(f"unknown ablation protocol {args.protocol!r}")
    path = write_report(
        {"protocol": args.protocol, "result": result, "seed": cfg.seed,
         "config_hash": config_hash(cfg)},
        args.out or ".", f"ablation_{args.protocol}")
    print(f"report -> {path}")
    return 0


def cmd_viz(args) -> int:
    cfg = _build_config(args)
    if not cfg.checkpoint_in:
        raise ConfigError("viz needs checkpoint_in (an extractor checkpoint)")
    loaded = _load_modules(cfg.checkpoint_in)
    if "extractor" not in loaded:
        raise CheckpointError(f"{cfg.checkpoint_in} holds no extractor tensors")
    holdout = _dataset_for(cfg, split="val")
    img: Image = holdout.items[args.index][0]
    pyr = extract_pyramid(loaded["extractor"], img)
    path = visualize_feature(pyr[args.level],
                             _out_path(args, f"feature_p{args.level}.png"),
                             reduction=args.reduction, upscale=args.upscale)
    print(f"heatmap -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srfeat")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE", help="config override")

    for name, fn in [
        ("make-synthetic", cmd_make_synthetic),
        ("pretrain-gan", cmd_pretrain_gan),
        ("train-extractor", cmd_train_extractor),
        ("train-detector", cmd_train_detector),
        ("eval", cmd_eval),
        ("compare-interp", cmd_compare_interp),
    ]:
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate")
    common(p)
    p.add_argument("--protocol", default="progressive",
                   choices=["progressive", "semantic_level", "degradation"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz")
    common(p)
    p.add_argument("--level", type=int, default=2)
    p.add_argument("--index", type=int, default=0, help="holdout image index")
    p.add_argument("--reduction", default="channel_mean",
                   choices=["channel_mean", "max", "pca1"])
    p.add_argument("--upscale", type=int, default=8)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalDivergence as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
