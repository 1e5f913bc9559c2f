"""Average precision against an independent greedy-matching oracle, feature L1
metrics, reports, and heatmap rendering."""

import numpy as np
import pytest
import torch
from PIL import Image as PilImage

from srfeat.evaluation import (AREA_RANGES, IOU_THRESHOLDS, EvalReport,
                               compute_ap_suite, visualize_feature,
                               visualize_grid)
from srfeat.head import DetectionTargets
from srfeat.pyramid import FeatureMap

# ---------------------------------------------------------------------------
# independent AP oracle: plain loops, greedy score-ordered matching,
# 101-point interpolated precision envelope
# ---------------------------------------------------------------------------


def _iou(a, b):
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    ix = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    iy = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def oracle_class_ap(dets_by_image, gts_by_image, thr, area_range):
    lo, hi = area_range
    scores, flags = [], []
    n_gt = 0
    for dets, gts in zip(dets_by_image, gts_by_image):
        ignore = [not (lo <= g[2] * g[3] < hi) for g in gts]
        n_gt += sum(1 for ig in ignore if not ig)
        taken = [False] * len(gts)
        # evaluated gts: non-ignored first (stable), ignored last
        gt_order = sorted(range(len(gts)), key=lambda j: ignore[j])
        for box, score in sorted(dets, key=lambda d: -d[1]):
            best_j, best = -1, thr
            for j in gt_order:
                if taken[j]:
                    continue
                if best_j >= 0 and not ignore[best_j] and ignore[j]:
                    break
                v = _iou(box, gts[j])
                if v < best:
                    continue
                best_j, best = j, v
            if best_j >= 0:
                taken[best_j] = True
                if not ignore[best_j]:
                    scores.append(score)
                    flags.append(1.0)
            elif lo <= box[2] * box[3] < hi:
                scores.append(score)
                flags.append(0.0)
    if n_gt == 0:
        return float("nan")
    if not scores:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(flags)[order]
    tpc = np.cumsum(tp)
    fpc = np.cumsum(1 - tp)
    rec = tpc / n_gt
    prec = tpc / np.maximum(tpc + fpc, 1e-12)
    vals = []
    for r in np.linspace(0, 1, 101):
        mask = rec >= r - 1e-12
        vals.append(prec[mask].max() if mask.any() else 0.0)
    return float(np.mean(vals))


def oracle_suite(detections, targets, num_classes):
    def mean_ap(thrs, rng_name):
        out = []
        for cls in range(num_classes):
            dets_c = [[(b, s) for b, c, s in per if c == cls] for per in detections]
            gts_c = [t.boxes[t.labels == cls].reshape(-1, 4).tolist() for t in targets]
            per_thr = [oracle_class_ap(dets_c, gts_c, t, AREA_RANGES[rng_name])
                       for t in thrs]
            per_thr = [v for v in per_thr if v == v]
            if per_thr:
                out.append(float(np.mean(per_thr)))
        return float(np.mean(out)) if out else 0.0

    return {
        "ap": mean_ap(IOU_THRESHOLDS, "all"),
        "ap50": mean_ap([0.5], "all"),
        "ap75": mean_ap([0.75], "all"),
        "ap_s": mean_ap(IOU_THRESHOLDS, "small"),
        "ap_m": mean_ap(IOU_THRESHOLDS, "medium"),
        "ap_l": mean_ap(IOU_THRESHOLDS, "large"),
    }


def _tgt(boxes, labels, size=(64, 64)):
    return DetectionTargets(boxes=np.array(boxes).reshape(-1, 4),
                            labels=np.array(labels, dtype=np.int64),
                            image_size=size)


def test_perfect_detections_score_one():
    boxes = [[5.0, 5.0, 20.0, 20.0], [30.0, 30.0, 12.0, 14.0]]
    dets = [[(np.array(b), 0, 0.9) for b in boxes]]
    suite = compute_ap_suite(dets, [_tgt(boxes, [0, 0])], num_classes=1)
    assert suite["ap"] == pytest.approx(1.0)
    assert suite["ap50"] == pytest.approx(1.0)
    assert suite["ap75"] == pytest.approx(1.0)


def test_no_detections_score_zero():
    suite = compute_ap_suite([[]], [_tgt([[5, 5, 10, 10]], [0])], num_classes=1)
    assert suite["ap"] == 0.0


def test_empty_everything_scores_zero():
    suite = compute_ap_suite([[]], [_tgt(np.zeros((0, 4)), [])], num_classes=2)
    assert suite == {k: 0.0 for k in suite}


def test_wrong_class_never_matches():
    boxes = [[5.0, 5.0, 20.0, 20.0]]
    dets = [[(np.array(boxes[0]), 1, 0.9)]]
    suite = compute_ap_suite(dets, [_tgt(boxes, [0])], num_classes=2)
    assert suite["ap"] == 0.0


def test_area_buckets():
    small = [2.0, 2.0, 10.0, 10.0]       # area 100 < 32^2
    large = [20.0, 20.0, 100.0, 100.0]   # area 10000 > 96^2
    dets = [[(np.array(small), 0, 0.9), (np.array(large), 0, 0.8)]]
    suite = compute_ap_suite(dets, [_tgt([small, large], [0, 0], size=(128, 128))],
                             num_classes=1)
    assert suite["ap_s"] == pytest.approx(1.0)
    assert suite["ap_l"] == pytest.approx(1.0)
    assert suite["ap_m"] == 0.0  # no medium ground truth -> skipped -> 0.0


def test_duplicate_detection_counts_as_fp():
    # two ground truths, but both detections hit the same one: the duplicate is
    # a false positive and recall never passes 0.5
    box = [5.0, 5.0, 20.0, 20.0]
    other = [40.0, 40.0, 20.0, 20.0]
    dets = [[(np.array(box), 0, 0.9), (np.array(box), 0, 0.8)]]
    suite = compute_ap_suite(dets, [_tgt([box, other], [0, 0])], num_classes=1)
    assert suite["ap50"] == pytest.approx(51 / 101)


def test_ap_matches_oracle_on_100_random_scenes():
    rng = np.random.RandomState(0)
    for trial in range(100):
        n_img = rng.randint(1, 4)
        detections, targets = [], []
        for _ in range(n_img):
            n_gt = rng.randint(0, 7)
            boxes = []
            for _ in range(n_gt):
                boxes.append([rng.uniform(0, 80), rng.uniform(0, 80),
                              rng.uniform(4, 60), rng.uniform(4, 60)])
            labels = rng.randint(0, 3, size=n_gt)
            targets.append(_tgt(np.array(boxes).reshape(-1, 4), labels,
                                size=(160, 160)))
            dets = []
            for _ in range(rng.randint(0, 7)):
                if boxes and rng.rand() < 0.7:
                    base = boxes[rng.randint(len(boxes))]
                    jitter = rng.uniform(-6, 6, size=4)
                    box = np.maximum([0, 0, 2, 2], np.array(base) + jitter)
                else:
                    box = np.array([rng.uniform(0, 80), rng.uniform(0, 80),
                                    rng.uniform(4, 60), rng.uniform(4, 60)])
                dets.append((box, int(rng.randint(0, 3)),
                             float(rng.uniform(0.05, 1.0))))
            detections.append(dets)
        got = compute_ap_suite(detections, targets, num_classes=3)
        want = oracle_suite(detections, targets, num_classes=3)
        for key in got:
            assert got[key] == pytest.approx(want[key], abs=1e-12), (trial, key)


def test_eval_report_json_round_trip():
    rep = EvalReport(per_level_l1={2: 0.5, 3: 0.25}, ap={"ap": 0.1},
                     config_hash="abc", seed=3, wall_ms=12.0)
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert isinstance(list(back.per_level_l1)[0], int)


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def test_visualize_feature_writes_png(tmp_path):
    fm = FeatureMap(data=torch.rand(8, 6, 9), level=2)
    for reduction in ("channel_mean", "max", "pca1"):
        path = visualize_feature(fm, tmp_path / f"{reduction}.png",
                                 reduction=reduction, upscale=2)
        with PilImage.open(path) as im:
            assert im.size == (18, 12)  # W x H, 2x upscale
            assert im.mode == "RGB"


def test_visualize_rejects_unknown_reduction(tmp_path):
    fm = FeatureMap(data=torch.rand(4, 4, 4), level=2)
    with pytest.raises(ValueError, match="unknown reduction"):
        visualize_feature(fm, tmp_path / "x.png", reduction="sum")


def test_visualize_deterministic(tmp_path):
    fm = FeatureMap(data=torch.rand(8, 5, 5), level=3)
    p1 = visualize_feature(fm, tmp_path / "a.png", reduction="pca1")
    p2 = visualize_feature(fm, tmp_path / "b.png", reduction="pca1")
    assert p1.read_bytes() == p2.read_bytes()


def test_visualize_grid(tmp_path):
    maps = {
        "nearest": FeatureMap(data=torch.rand(4, 8, 8), level=2),
        "srf": FeatureMap(data=torch.rand(4, 8, 8), level=2),
    }
    path = visualize_grid(maps, tmp_path / "grid.png")
    with PilImage.open(path) as im:
        assert im.size == (17, 8)  # two 8-wide panels + 1px separator
