"""Metrics and reports: held-out feature reconstruction L1, COCO-style AP
(101-point interpolation, greedy score-ordered matching), and feature-map
heatmap rendering.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PilImage

from .data import Dataset, degrade_image
from .extractor import FpnExtractor
from .generator import SrfGenerator
from .head import DetectionTargets, decode_detections
from .pyramid import FeatureMap, downsample_tensor, upsample_tensor

IOU_THRESHOLDS = np.arange(0.5, 1.0, 0.05).round(2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}


@dataclass
class EvalReport:
    per_level_l1: dict[int, float] = field(default_factory=dict)
    ap: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    wall_ms: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "per_level_l1": {str(k): v for k, v in sorted(self.per_level_l1.items())},
            "ap": dict(sorted(self.ap.items())),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "wall_ms": self.wall_ms,
        }, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            per_level_l1={int(k): v for k, v in raw["per_level_l1"].items()},
            ap=raw["ap"], config_hash=raw["config_hash"],
            seed=raw["seed"], wall_ms=raw["wall_ms"],
        )


# ---------------------------------------------------------------------------
# feature reconstruction metrics
# ---------------------------------------------------------------------------

def feature_l1_eval(
    upsampler: str | SrfGenerator,
    target_extractor: FpnExtractor,
    dataset: Dataset,
    s: float = 0.5,
    degradation: str = "bilinear",
    config_hash: str = "",
    seed: int = 0,
) -> EvalReport:
    """Mean per-level L1 between upsampled low-res features and target features.

    The per-image construction: extract the target pyramid from the image and
    the low-res pyramid from its degraded counterpart, upsample each low-res
    level 2x with the method (or generator) under test, compare level-wise.
    """
    if len(dataset) == 0:
        raise ValueError("dataset split is empty")
    t0 = time.perf_counter()
    target_extractor.eval()
    gen = upsampler if isinstance(upsampler, SrfGenerator) else None
    if gen is not None:
        gen.eval()
    sums: dict[int, float] = {}
    with torch.no_grad():
        for img, _ in dataset.items:
            x = img.data.unsqueeze(0)
            x_lr = degrade_image(img, s, degradation).data.unsqueeze(0)
            p_tr = target_extractor(x)
            p_lr = target_extractor(x_lr)
            for lvl in p_tr:
                sr = gen(p_lr[lvl]) if gen is not None else upsample_tensor(p_lr[lvl], upsampler)
                sums[lvl] = sums.get(lvl, 0.0) + float((sr - p_tr[lvl]).abs().mean())
    n = len(dataset)
    return EvalReport(
        per_level_l1={lvl: v / n for lvl, v in sorted(sums.items())},
        config_hash=config_hash, seed=seed,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def extractor_feature_l1(
    extractor: FpnExtractor,
    target_extractor: FpnExtractor,
    dataset: Dataset,
    s: float = 0.5,
    degradation: str = "bilinear",
) -> dict[int, float]:
    """Per-level L1 of the super-resolving extractor's pyramid on degraded
    inputs against floor-downsampled target features."""
    if len(dataset) == 0:
        raise ValueError("dataset split is empty")
    extractor.eval()
    target_extractor.eval()
    sums: dict[int, float] = {}
    with torch.no_grad():
        for img, _ in dataset.items:
            x_lr = degrade_image(img, s, degradation).data.unsqueeze(0)
            p_sr = extractor(x_lr)
            p_tr = target_extractor(img.data.unsqueeze(0))
            for lvl in p_sr:
                tgt = downsample_tensor(p_tr[lvl], s)
                sums[lvl] = sums.get(lvl, 0.0) + float((p_sr[lvl] - tgt).abs().mean())
    n = len(dataset)
    return {lvl: v / n for lvl, v in sorted(sums.items())}


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def _iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    dx1, dy1 = dets[:, 0:1], dets[:, 1:2]
    dx2, dy2 = dx1 + dets[:, 2:3], dy1 + dets[:, 3:4]
    gx1, gy1 = gts[:, 0], gts[:, 1]
    gx2, gy2 = gx1 + gts[:, 2], gy1 + gts[:, 3]
    ix = np.clip(np.minimum(dx2, gx2) - np.maximum(dx1, gx1), 0, None)
    iy = np.clip(np.minimum(dy2, gy2) - np.maximum(dy1, gy1), 0, None)
    inter = ix * iy
    union = dets[:, 2:3] * dets[:, 3:4] + gts[:, 2] * gts[:, 3] - inter
    return np.where(union > 0, inter / union, 0.0)


def _interpolated_ap(scores, matched, n_gt) -> float:
    """101-point interpolated AP from per-detection TP flags."""
    if n_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(matched, dtype=np.float64)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # precision envelope: best precision at recall >= r
    prec_at = np.zeros_like(RECALL_POINTS)
    for i, r in enumerate(RECALL_POINTS):
        mask = recall >= r - 1e-12
        prec_at[i] = precision[mask].max() if mask.any() else 0.0
    return float(prec_at.mean())


def _class_ap(dets_by_image, gts_by_image, iou_thr, area_range) -> float:
    """AP for one class at one IoU threshold over an area range.

    Ground truth outside the range is ignored; detections matched to ignored
    ground truth, or unmatched with area outside the range, do not count.
    """
    lo, hi = area_range
    scores, matched = [], []
    n_gt = 0
    for dets, gts in zip(dets_by_image, gts_by_image):
        areas = gts[:, 2] * gts[:, 3] if len(gts) else np.zeros(0)
        ignore = ~((areas >= lo) & (areas < hi))
        n_gt += int((~ignore).sum())
        taken = np.zeros(len(gts), dtype=bool)
        det_order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
        gt_order = sorted(range(len(gts)), key=lambda j: bool(ignore[j]))
        iou = _iou_matrix(np.array([d[0] for d in dets]).reshape(-1, 4), gts)
        for di in det_order:
            box, score = dets[di]
            best_j, best_iou = -1, iou_thr
            for j in gt_order:
                if taken[j]:
                    continue
                if best_j >= 0 and not ignore[best_j] and ignore[j]:
                    break  # a live match exists; never trade it for an ignored one
                if iou[di, j] < best_iou:
                    continue
                best_j, best_iou = j, iou[di, j]
            if best_j >= 0:
                taken[best_j] = True
                if not ignore[best_j]:
                    scores.append(score)
                    matched.append(1.0)
                # match to ignored gt: detection is discarded entirely
            else:
                area = box[2] * box[3]
                if lo <= area < hi:
                    scores.append(score)
                    matched.append(0.0)
                # unmatched detection outside the range is ignored
    return _interpolated_ap(scores, matched, n_gt)


def compute_ap_suite(
    detections: list[list[tuple[np.ndarray, int, float]]],
    targets: list[DetectionTargets],
    num_classes: int,
) -> dict[str, float]:
    """COCO-style metrics: AP (IoU 0.50:0.05:0.95), AP50, AP75, AP_S/M/L."""
    def mean_ap(iou_thrs, range_name) -> float:
        vals = []
        for cls in range(num_classes):
            dets_c = [
                [(box, score) for box, c, score in per_img if c == cls]
                for per_img in detections
            ]
            gts_c = [
                tgt.boxes[tgt.labels == cls].reshape(-1, 4) for tgt in targets
            ]
            per_thr = [
                _class_ap(dets_c, gts_c, thr, AREA_RANGES[range_name])
                for thr in iou_thrs
            ]
            per_thr = [v for v in per_thr if v == v]  # drop classes without GT
            if per_thr:
                vals.append(float(np.mean(per_thr)))
        return float(np.mean(vals)) if vals else 0.0

    return {
        "ap": mean_ap(IOU_THRESHOLDS, "all"),
        "ap50": mean_ap([0.5], "all"),
        "ap75": mean_ap([0.75], "all"),
        "ap_s": mean_ap(IOU_THRESHOLDS, "small"),
        "ap_m": mean_ap(IOU_THRESHOLDS, "medium"),
        "ap_l": mean_ap(IOU_THRESHOLDS, "large"),
    }


def evaluate_detector(
    extractor: FpnExtractor,
    head,
    dataset: Dataset,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    level_mask: tuple[int, ...] = (2, 3, 4, 5),
    config_hash: str = "",
    seed: int = 0,
) -> EvalReport:
    """Run the detector over a split and compute the AP suite."""
    if len(dataset) == 0:
        raise ValueError("dataset split is empty")
    t0 = time.perf_counter()
    extractor.eval()
    head.eval()
    detections = []
    targets = []
    with torch.no_grad():
        for img, tgt in dataset.items:
            pyr = extractor(img.data.unsqueeze(0))
            preds = head({lvl: pyr[lvl] for lvl in level_mask})
            detections.append(decode_detections(preds, score_threshold, nms_iou))
            targets.append(tgt)
    ap = compute_ap_suite(detections, targets, head.num_classes)
    return EvalReport(
        ap=ap, config_hash=config_hash, seed=seed,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


# ---------------------------------------------------------------------------
# visualization
# ---------------------------------------------------------------------------

REDUCTIONS = ("channel_mean", "max", "pca1")


def visualize_feature(fm: FeatureMap, output_path: str | Path,
                      reduction: str = "channel_mean", upscale: int = 1) -> Path:
    """Write an H x W viridis heatmap of a reduced feature map as an 8-bit PNG."""
    arr = _reduce(fm.data, reduction)
    return _write_heatmap(arr, output_path, upscale)


def visualize_grid(maps: dict[str, FeatureMap], output_path: str | Path,
                   reduction: str = "channel_mean", upscale: int = 1) -> Path:
    """Side-by-side heatmaps for method comparison, in sorted label order."""
    panels = [_colorize(_reduce(maps[k].data, reduction)) for k in sorted(maps)]
    h = max(p.shape[0] for p in panels)
    padded = []
    for p in panels:
        if p.shape[0] < h:
            p = np.pad(p, ((0, h - p.shape[0]), (0, 0), (0, 0)))
        padded.append(p)
    sep = np.zeros((h, 1, 3), dtype=np.uint8)
    strip = padded[0]
    for p in padded[1:]:
        strip = np.concatenate([strip, sep, p], axis=1)
    return _save_png(strip, output_path, upscale)


def _reduce(data: torch.Tensor, reduction: str) -> np.ndarray:
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")
    x = data.detach().numpy()
    if reduction == "channel_mean":
        return x.mean(axis=0)
    if reduction == "max":
        return x.max(axis=0)
    flat = x.reshape(x.shape[0], -1)
    centered = flat - flat.mean(axis=1, keepdims=True)
    # first principal component over channels, deterministic sign
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comp = vt[0]
    if comp[np.argmax(np.abs(comp))] < 0:
        comp = -comp
    return comp.reshape(x.shape[1:])


def _colorize(arr: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    lo, hi = float(arr.min()), float(arr.max())
    norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    rgba = colormaps["viridis"](norm)
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def _write_heatmap(arr: np.ndarray, path: str | Path, upscale: int) -> Path:
    return _save_png(_colorize(arr), path, upscale)


def _save_png(rgb: np.ndarray, path: str | Path, upscale: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if upscale > 1:
        rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
    PilImage.fromarray(rgb).save(path)
    return path
