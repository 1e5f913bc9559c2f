"""Dataset ingestion, synthetic-shapes generation, image degradation, batching.

The annotation format is a strict subset of the COCO schema (images /
annotations / categories with xywh bboxes), so genuine COCO-subset files load
unchanged.  The synthetic generator is the CI default: colored rectangles,
ellipses and triangles on textured backgrounds with exact boxes.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PilImage

from .head import DetectionTargets
from .pyramid import Image

DEGRADATION_METHODS = ("nearest", "bilinear", "bicubic")
SYNTHETIC_CLASSES = ["rectangle", "ellipse", "triangle"]


@dataclass
class Dataset:
    items: list[tuple[Image, DetectionTargets]] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, idx: int):
        return self.items[idx]


def degrade_image(img: Image, s: float, method: str = "bilinear") -> Image:
    """Shrink an image by factor s with the named interpolation; clamps to [0,1]."""
    if method not in DEGRADATION_METHODS:
        raise ValueError(
            f"unknown degradation method {method!r}; expected one of {DEGRADATION_METHODS}"
        )
    if not 0.0 < s <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {s}")
    if s == 1.0:
        return Image(data=img.data.clone(), ident=img.ident)
    out_h = math.floor(s * img.height)
    out_w = math.floor(s * img.width)
    if out_h < 16 or out_w < 16:
        raise ValueError(
            f"degraded image would be {out_h}x{out_w}; minimum is 16x16"
        )
    x = img.data.unsqueeze(0)
    if method == "nearest":
        y = F.interpolate(x, size=(out_h, out_w), mode="nearest")
    else:
        y = F.interpolate(x, size=(out_h, out_w), mode=method, align_corners=False)
    return Image(data=y.squeeze(0).clamp(0.0, 1.0), ident=img.ident)


def _textured_background(rng: np.random.RandomState, size: int) -> np.ndarray:
    base = rng.uniform(0.1, 0.6, size=3)
    coarse = rng.uniform(-0.08, 0.08, size=(3, 8, 8))
    noise = F.interpolate(
        torch.from_numpy(coarse).unsqueeze(0), size=(size, size),
        mode="bilinear", align_corners=False,
    ).squeeze(0).numpy()
    img = base[:, None, None] + noise
    return img.clip(0.0, 1.0)


def _draw_shape(img: np.ndarray, cls: int, box: tuple[float, float, float, float],
                color: np.ndarray) -> None:
    x, y, w, h = box
    size = img.shape[1]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if cls == 0:  # rectangle
        mask = (xs >= x) & (xs <= x + w) & (ys >= y) & (ys <= y + h)
    elif cls == 1:  # ellipse
        cx, cy, rx, ry = x + w / 2, y + h / 2, w / 2, h / 2
        mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    else:  # isoceles triangle: apex top-center, base at bottom of the box
        apex = (x + w / 2, y)
        bl, br = (x, y + h), (x + w, y + h)
        def side(p, q):
            return (q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])
        d1, d2, d3 = side(apex, bl), side(bl, br), side(br, apex)
        mask = ((d1 <= 0) & (d2 <= 0) & (d3 <= 0)) | ((d1 >= 0) & (d2 >= 0) & (d3 >= 0))
    img[:, mask] = color[:, None]


def generate_synthetic(num_images: int, image_size: int, seed: int,
                       split: str = "train") -> Dataset:
    """Deterministic synthetic detection dataset with exact ground-truth boxes."""
    if image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {image_size}")
    rng = np.random.RandomState(seed)
    items = []
    for idx in range(num_images):
        canvas = _textured_background(rng, image_size)
        n_obj = rng.randint(1, 5)
        boxes, labels = [], []
        for _ in range(n_obj):
            cls = int(rng.randint(0, 3))
            w = float(rng.uniform(10, min(28, image_size - 4)))
            h = float(rng.uniform(10, min(28, image_size - 4)))
            x = float(rng.uniform(1, image_size - w - 1))
            y = float(rng.uniform(1, image_size - h - 1))
            color = rng.uniform(0.3, 1.0, size=3)
            _draw_shape(canvas, cls, (x, y, w, h), color)
            boxes.append([x, y, w, h])
            labels.append(cls)
        img = Image(data=torch.from_numpy(canvas).float().clamp(0, 1),
                    ident=f"{split}-{idx:05d}")
        targets = DetectionTargets(
            boxes=np.array(boxes), labels=np.array(labels),
            image_size=(image_size, image_size),
        )
        items.append((img, targets))
    return Dataset(items=items, classes=list(SYNTHETIC_CLASSES), split=split)


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Write images as PNGs plus a COCO-subset annotation file; returns its path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for img_id, (img, tgt) in enumerate(dataset.items, start=1):
        name = f"{img.ident or img_id}.png"
        arr = (img.data.numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
        PilImage.fromarray(arr).save(root / "images" / name)
        images.append({
            "id": img_id, "file_name": name,
            "width": img.width, "height": img.height,
        })
        for box, label in zip(tgt.boxes, tgt.labels):
            annotations.append({
                "id": ann_id, "image_id": img_id,
                "bbox": [float(v) for v in box],
                "category_id": int(label) + 1,
            })
            ann_id += 1
    categories = [{"id": i + 1, "name": n} for i, n in enumerate(dataset.classes)]
    ann_path = root / "annotations.json"
    with open(ann_path, "w") as fh:
        json.dump({"images": images, "annotations": annotations,
                   "categories": categories}, fh, indent=1, sort_keys=True)
    return ann_path


def load_dataset(root: str | Path, annotation_file: str | Path,
                 split: str = "train") -> Dataset:
    """Load a COCO-subset annotation file and its image files."""
    root = Path(root)
    try:
        with open(annotation_file) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed annotation file {annotation_file}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise ValueError(f"annotation file missing {key!r} section")
    categories = sorted(payload["categories"], key=lambda c: c["id"])
    cat_to_index = {c["id"]: i for i, c in enumerate(categories)}
    by_image: dict[int, list[dict]] = {}
    for rec_idx, ann in enumerate(payload["annotations"]):
        try:
            by_image.setdefault(ann["image_id"], []).append(ann)
        except (TypeError, KeyError) as exc:
            raise ValueError(f"malformed annotation record {rec_idx}: {exc}") from exc
    items = []
    clamp_warnings = 0
    for rec in payload["images"]:
        path = root / "images" / rec["file_name"]
        if not path.exists():
            path = root / rec["file_name"]
        if not path.exists():
            raise FileNotFoundError(f"annotation references missing image: {rec['file_name']}")
        arr = np.asarray(PilImage.open(path).convert("RGB"), dtype=np.float32) / 255.0
        img = Image(data=torch.from_numpy(arr.transpose(2, 0, 1)), ident=str(rec["file_name"]))
        h, w = img.height, img.width
        boxes, labels = [], []
        for ann in by_image.get(rec["id"], ()):
            if ann["category_id"] not in cat_to_index:
                raise ValueError(
                    f"annotation {ann.get('id')} uses unknown category {ann['category_id']}"
                )
            x, y, bw, bh = ann["bbox"]
            cx, cy = max(0.0, x), max(0.0, y)
            cw = min(bw, w - cx)
            ch = min(bh, h - cy)
            if (cx, cy, cw, ch) != (x, y, bw, bh):
                clamp_warnings += 1
            if cw <= 0 or ch <= 0:
                continue
            boxes.append([cx, cy, cw, ch])
            labels.append(cat_to_index[ann["category_id"]])
        items.append((img, DetectionTargets(
            boxes=np.array(boxes).reshape(-1, 4), labels=np.array(labels, dtype=np.int64),
            image_size=(h, w),
        )))
    if clamp_warnings:
        warnings.warn(f"clamped {clamp_warnings} box(es) to image bounds", stacklevel=2)
    return Dataset(items=items, classes=[c["name"] for c in categories], split=split)


def batch_iterator(dataset: Dataset, batch_size: int, seed: int):
    """Infinite batch stream; order is a pure function of (dataset, seed, batch size).

    Each epoch is a fresh seeded permutation; trailing items that do not fill a
    batch roll into the next epoch's stream.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.RandomState(seed)
    buffer: list[int] = []
    while True:
        buffer.extend(rng.permutation(len(dataset)).tolist())
        while len(buffer) >= batch_size:
            idx, buffer = buffer[:batch_size], buffer[batch_size:]
            yield [dataset[i] for i in idx]


def stack_images(items: list[tuple[Image, DetectionTargets]]) -> tuple[torch.Tensor, list[DetectionTargets]]:
    """Stack equally sized images into a batch tensor."""
    sizes = {tuple(img.data.shape) for img, _ in items}
    if len(sizes) != 1:
        raise ValueError(f"cannot stack images of mixed sizes: {sorted(sizes)}")
    batch = torch.stack([img.data for img, _ in items])
    return batch, [tgt for _, tgt in items]
