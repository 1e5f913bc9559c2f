"""Small anchor-free one-stage detection head.

Per pyramid level the shared tower predicts class logits and left/top/right/
bottom distances (normalized by the level stride) at every location.  Boxes
are assigned to a level by their max side, and a location is positive when it
falls inside an assigned box (smallest box wins on overlap).  Classification
uses a sigmoid focal loss, box regression an L1 on the normalized distances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .losses import LossReport
from .pyramid import FeaturePyramid

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
# max box side (image pixels) -> pyramid level
SIZE_BUCKETS = ((32, 2), (64, 3), (128, 4), (float("inf"), 5))


def level_for_box(w: float, h: float) -> int:
    side = max(w, h)
    for bound, lvl in SIZE_BUCKETS:
        if side < bound:
            return lvl
    return SIZE_BUCKETS[-1][1]


@dataclass
class DetectionTargets:
    """Ground-truth boxes (x, y, w, h in absolute pixels) and class labels."""

    boxes: np.ndarray
    labels: np.ndarray
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels must have equal length")
        if len(self.boxes) and (self.boxes[:, 2:] <= 0).any():
            raise ValueError("degenerate box: w and h must be > 0")


def scale_targets(targets: DetectionTargets, s: float) -> DetectionTargets:
    """Rescale boxes and image dims by s in (0, 1]; sub-pixel boxes are dropped."""
    if not 0.0 < s <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {s}")
    if s == 1.0:
        return DetectionTargets(
            boxes=targets.boxes.copy(), labels=targets.labels.copy(),
            image_size=targets.image_size,
        )
    h, w = targets.image_size
    boxes = targets.boxes * s
    keep = (boxes[:, 2] >= 1.0) & (boxes[:, 3] >= 1.0)
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"scale_targets dropped {dropped} box(es) below 1px", stacklevel=2)
    return DetectionTargets(
        boxes=boxes[keep],
        labels=targets.labels[keep],
        image_size=(int(h * s), int(w * s)),
    )


class DetectionHead(nn.Module):
    """Shared conv tower + classification and box-regression 1x1 convs."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        self.tower = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
        )
        self.cls = nn.Conv2d(channels, num_classes, 1)
        self.box = nn.Conv2d(channels, 4, 1)
        # bias so that initial foreground probability is low (focal-loss warmup)
        nn.init.constant_(self.cls.bias, -2.0)

    def forward(self, pyramid, level_mask=None) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
        if isinstance(pyramid, FeaturePyramid):
            pyramid = {lvl: fm.data.unsqueeze(0) for lvl, fm in pyramid.items()}
        levels = sorted(pyramid) if level_mask is None else sorted(level_mask)
        if not levels:
            raise ValueError("level_mask must select at least one level")
        out = {}
        for lvl in levels:
            t = pyramid[lvl]
            if t.dim() == 3:
                t = t.unsqueeze(0)
            h = self.tower(t)
            out[lvl] = (self.cls(h), self.box(h))
        return out


def init_head(channels: int, num_classes: int, seed: int) -> DetectionHead:
    """Deterministically initialized head."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        head = DetectionHead(channels, num_classes)
    return head


def head_forward(head: DetectionHead, pyr, level_mask=None):
    return head(pyr, level_mask)


def assign_targets(
    targets: DetectionTargets,
    level_shapes: dict[int, tuple[int, int]],
    pad_offset: tuple[int, int] = (0, 0),
):
    """Per level: (class index map H x W with -1 for background, ltrb target 4 x H x W).

    A location is positive for a box when the box's size bucket selects the
    location's level and the location center lies inside the box; overlaps
    resolve to the smallest box.
    """
    off_y, off_x = pad_offset
    out = {}
    for lvl, (fh, fw) in sorted(level_shapes.items()):
        stride = 2 ** lvl
        cls_map = np.full((fh, fw), -1, dtype=np.int64)
        box_map = np.zeros((4, fh, fw), dtype=np.float64)
        best_area = np.full((fh, fw), np.inf)
        ys = (np.arange(fh) + 0.5) * stride - off_y
        xs = (np.arange(fw) + 0.5) * stride - off_x
        cy, cx = np.meshgrid(ys, xs, indexing="ij")
        for (x, y, w, h), label in zip(targets.boxes, targets.labels):
            if level_for_box(w, h) != lvl:
                continue
            inside = (cx >= x) & (cx <= x + w) & (cy >= y) & (cy <= y + h)
            take = inside & (w * h < best_area)
            if not take.any():
                continue
            best_area[take] = w * h
            cls_map[take] = label
            box_map[0][take] = (cx[take] - x) / stride
            box_map[1][take] = (cy[take] - y) / stride
            box_map[2][take] = (x + w - cx[take]) / stride
            box_map[3][take] = (y + h - cy[take]) / stride
        out[lvl] = (cls_map, box_map)
    return out


def detection_loss(
    preds: dict[int, tuple[torch.Tensor, torch.Tensor]],
    targets: DetectionTargets | list[DetectionTargets],
    pad_offset: tuple[int, int] = (0, 0),
) -> tuple[torch.Tensor, LossReport]:
    """Focal classification + L1 box regression, both averaged over positives."""
    if isinstance(targets, DetectionTargets):
        targets = [targets]
    some = next(iter(preds.values()))[0]
    batch = some.shape[0]
    if len(targets) != batch:
        raise ValueError(f"{len(targets)} target sets for batch of {batch}")

    cls_losses = []
    box_losses = []
    num_pos = 0
    for b, tgt in enumerate(targets):
        shapes = {lvl: tuple(p[0].shape[-2:]) for lvl, p in preds.items()}
        assigned = assign_targets(tgt, shapes, pad_offset)
        for lvl, (logits, boxes) in preds.items():
            cls_map, box_map = assigned[lvl]
            cls_t = torch.from_numpy(cls_map)
            logit = logits[b]  # K x H x W
            onehot = torch.zeros_like(logit)
            pos = cls_t >= 0
            if pos.any():
                yy, xx = pos.nonzero(as_tuple=True)
                onehot[cls_t[pos], yy, xx] = 1.0
            p = torch.sigmoid(logit)
            pt = p * onehot + (1 - p) * (1 - onehot)
            alpha_t = FOCAL_ALPHA * onehot + (1 - FOCAL_ALPHA) * (1 - onehot)
            focal = -alpha_t * (1 - pt).pow(FOCAL_GAMMA) * torch.log(pt.clamp_min(1e-12))
            cls_losses.append(focal.sum())
            if pos.any():
                tgt_box = torch.from_numpy(box_map).to(boxes.dtype)
                yy, xx = pos.nonzero(as_tuple=True)
                box_losses.append((boxes[b][:, yy, xx] - tgt_box[:, yy, xx]).abs().mean(0).sum())
                num_pos += int(pos.sum())

    norm = max(1, num_pos)
    cls_term = torch.stack(cls_losses).sum() / norm
    box_term = (torch.stack(box_losses).sum() / norm) if box_losses else cls_term.new_tensor(0.0)
    total = cls_term + box_term
    report = LossReport(
        total=float(total.detach()),
        per_term={"det_cls": float(cls_term.detach()),
                  "det_box": float(box_term.detach())},
        per_level={},
    )
    return total, report


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    ax1, ay1, aw, ah = a
    bx1, by1, bw, bh = b
    ax2, ay2 = ax1 + aw, ay1 + ah
    bx2, by2 = bx1 + bw, by1 + bh
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def decode_detections(
    preds: dict[int, tuple[torch.Tensor, torch.Tensor]],
    score_threshold: float,
    nms_iou: float,
    pad_offset: tuple[int, int] = (0, 0),
    batch_index: int = 0,
) -> list[tuple[np.ndarray, int, float]]:
    """Reconstruct (box xywh, class, score) triples with greedy per-class NMS."""
    for name, v in (("score_threshold", score_threshold), ("nms_iou", nms_iou)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    off_y, off_x = pad_offset
    raw = []
    for lvl, (logits, boxes) in preds.items():
        stride = 2 ** lvl
        p = torch.sigmoid(logits[batch_index]).detach().numpy()
        ltrb = boxes[batch_index].detach().numpy().clip(min=0.0) * stride
        k, fh, fw = p.shape
        cy = (np.arange(fh) + 0.5) * stride - off_y
        cx = (np.arange(fw) + 0.5) * stride - off_x
        for cls_idx in range(k):
            yy, xx = np.nonzero(p[cls_idx] > score_threshold)
            for y, x in zip(yy, xx):
                l, t, r, b = ltrb[:, y, x]
                x1, y1 = cx[x] - l, cy[y] - t
                box = np.array([x1, y1, l + r, t + b])
                if box[2] <= 0 or box[3] <= 0:
                    continue
                raw.append((box, cls_idx, float(p[cls_idx, y, x])))
    raw.sort(key=lambda d: -d[2])
    kept: list[tuple[np.ndarray, int, float]] = []
    for box, cls_idx, score in raw:
        if any(c == cls_idx and _iou(box, kb) > nms_iou for kb, c, _ in kept):
            continue
        kept.append((box, cls_idx, score))
    return kept
