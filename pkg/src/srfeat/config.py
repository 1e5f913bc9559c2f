"""Training configuration: dataclass, flat key=value config files, overrides.

Config files are UTF-8 text, one `key = value` per line, `#` comments.
Unknown keys are hard errors.  List-valued fields use comma separation
(`milestones = 1600` or `milestones = 3120,3720`).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

_STAGE_DEFAULTS = {
    # stage: (iterations, base_lr, milestones)
    1: (2000, 0.001, (1600,)),
    2: (4000, 0.02, (3120, 3720)),
    3: (4000, 0.01, (3200, 3700)),
}


@dataclass
class TrainConfig:
    seed: int = 0
    stage: int = 1
    dataset: str = "synthetic"          # "synthetic" or a dataset root directory
    annotations: str = ""               # annotation file when dataset is a directory
    num_images: int = 500               # synthetic set size
    image_size: int = 64                # synthetic image side
    holdout_images: int = 50            # synthetic held-out set size
    iterations: int = 2000
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 0.0001
    base_lr: float = 0.001
    milestones: tuple[int, ...] = (1600,)
    decay_factor: float = 0.1
    lam: float = 0.001                  # adversarial weight (config key: lambda)
    s: float = 0.5                      # degradation factor
    degradation_method: str = "bilinear"
    upsampler: str = "srf"
    reuse: str = "none"                 # none | G | M
    freeze_generator: bool = False
    semantic_level_mode: str = "matched"
    ablation: str = "none"              # A1..A5 | none
    channels: int = 256
    backbone_widths: tuple[int, ...] = (32, 64, 128, 256)
    disc_widths: tuple[int, ...] = (512, 1024, 1024)
    num_classes: int = 3
    level_mask: tuple[int, ...] = (2, 3, 4, 5)
    grad_clip: float = 10.0
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    checkpoint_in: str = ""
    checkpoint_out: str = ""
    target_checkpoint: str = ""         # frozen target-extractor checkpoint
    log_path: str = ""


# config-file key -> dataclass field (only where they differ)
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_KEYS = {f.name: ("lambda" if f.name == "lam" else f.name) for f in fields(TrainConfig)}
_KEY_FIELDS = {v: k for k, v in _FIELD_KEYS.items()}


def default_config(stage: int = 1, **overrides) -> TrainConfig:
    """Config with the stage's default schedule applied."""
    if stage not in _STAGE_DEFAULTS:
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    iterations, base_lr, milestones = _STAGE_DEFAULTS[stage]
    cfg = TrainConfig(stage=stage, iterations=iterations, base_lr=base_lr,
                      milestones=milestones)
    cfg = replace(cfg, **overrides)
    validate_config(cfg)
    return cfg


def _parse_value(name: str, text: str):
    ftype = {f.name: f.type for f in fields(TrainConfig)}[name]
    text = text.strip()
    try:
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype.startswith("tuple"):
            if not text:
                return ()
            return tuple(int(v) for v in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {_FIELD_KEYS[name]!r}: {exc}") from exc


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply `key=value` strings on top of a config."""
    updates = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _KEY_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        name = _KEY_FIELDS[key]
        updates[name] = _parse_value(name, value)
    cfg = replace(cfg, **updates)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a flat key=value config file on top of defaults (or `base`)."""
    cfg = base if base is not None else TrainConfig()
    overrides = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        overrides.append(line)
    return apply_overrides(cfg, overrides)


def validate_config(cfg: TrainConfig) -> None:
    if cfg.stage not in (1, 2, 3):
        raise ConfigError(f"stage must be 1, 2 or 3, got {cfg.stage}")
    if cfg.iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {cfg.iterations}")
    ms = cfg.milestones
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigError(f"milestones must be strictly increasing, got {ms}")
    if ms and ms[-1] >= cfg.iterations:
        raise ConfigError(
            f"milestones must be < iterations ({cfg.iterations}), got {ms}"
        )
    if not 0.0 < cfg.s < 1.0:
        raise ConfigError(f"s must be in (0, 1), got {cfg.s}")
    if cfg.lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {cfg.lam}")
    if cfg.degradation_method not in ("nearest", "bilinear", "bicubic"):
        raise ConfigError(f"unknown degradation_method {cfg.degradation_method!r}")
    if cfg.upsampler not in ("nearest", "bilinear", "bicubic", "srf"):
        raise ConfigError(f"unknown upsampler {cfg.upsampler!r}")
    if cfg.reuse not in ("none", "G", "M"):
        raise ConfigError(f"reuse must be none, G or M, got {cfg.reuse!r}")
    if cfg.reuse == "M" and cfg.stage != 3:
        raise ConfigError("reuse = M is only valid for stage 3")
    if cfg.semantic_level_mode not in ("matched", "mismatched"):
        raise ConfigError(
            f"semantic_level_mode must be matched or mismatched, got {cfg.semantic_level_mode!r}"
        )
    if cfg.ablation not in ("none", "A1", "A2", "A3", "A4", "A5"):
        raise ConfigError(f"ablation must be A1..A5 or none, got {cfg.ablation!r}")
    if len(cfg.backbone_widths) != 4:
        raise ConfigError(f"backbone_widths needs 4 entries, got {cfg.backbone_widths}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")


def config_lines(cfg: TrainConfig) -> str:
    """Canonical text rendering, used for hashing and for report embedding."""
    parts = []
    for f in sorted(fields(TrainConfig), key=lambda f: _FIELD_KEYS[f.name]):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        parts.append(f"{_FIELD_KEYS[f.name]} = {value}")
    return "\n".join(parts) + "\n"


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(config_lines(cfg).encode()).hexdigest()[:16]
