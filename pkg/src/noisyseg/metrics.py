"""Pixel and instance metrics: precision, recall, IoU, Dice, AP@IoU.

Images are 2D slices. Instances are 8-connected components of a thresholded
probability map, scored by their mean probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import check_same_shape
from .segmodel.kernels import label8


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(pred, gt) -> ConfusionCounts:
    check_same_shape(pred, gt)
    p = np.asarray(pred) == 1
    g = np.asarray(gt) == 1
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 1.0


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else 1.0


@dataclass
class InstanceSet:
    """Disjoint instances of one image, kept as a label map (0 = background)."""

    labels: np.ndarray
    confidences: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.confidences)

    def pixels(self, k: int) -> np.ndarray:
        """Flat pixel indices of instance k (0-based)."""
        return np.flatnonzero(self.labels.ravel() == k + 1)


def extract_instances(prob, threshold: float = 0.5) -> InstanceSet:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    prob = np.asarray(prob, dtype=np.float64)
    labels, n = label8(prob >= threshold)
    if n == 0:
        return InstanceSet(labels, np.zeros(0))
    flat = labels.ravel()
    sums = np.bincount(flat, weights=prob.ravel(), minlength=n + 1)[1:]
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    return InstanceSet(labels, sums / sizes)


def instances_from_mask(mask) -> InstanceSet:
    """Ground-truth instances of a binary mask, confidence 1."""
    labels, n = label8(np.asarray(mask) == 1)
    return InstanceSet(labels, np.ones(n))


def iou_matrix(preds: InstanceSet, gts: InstanceSet) -> np.ndarray:
    """(n_pred, n_gt) IoU of every instance pair within one image."""
    n_p, n_g = len(preds), len(gts)
    if n_p == 0 or n_g == 0:
        return np.zeros((n_p, n_g))
    a = preds.labels.ravel().astype(np.int64)
    b = gts.labels.ravel().astype(np.int64)
    joint = np.bincount(a * (n_g + 1) + b, minlength=(n_p + 1) * (n_g + 1)).reshape(n_p + 1, n_g + 1)
    inter = joint[1:, 1:].astype(np.float64)
    size_p = joint[1:, :].sum(axis=1)[:, None]
    size_g = joint[:, 1:].sum(axis=0)[None, :]
    return inter / (size_p + size_g - inter)


@dataclass
class MatchResult:
    scores: np.ndarray  # confidences in ranked order
    is_tp: np.ndarray
    matched_iou: np.ndarray  # IoU of each ranked prediction with its match, 0 if none
    n_gt: int


def match_corpus(preds: Sequence[InstanceSet], gts: Sequence[InstanceSet], iou_threshold: float) -> MatchResult:
    """Rank predictions across images by confidence (ties: image, then instance
    order) and greedily match each to the unmatched GT with highest IoU."""
    if len(preds) != len(gts):
        raise ValueError("need one prediction set per ground-truth image")
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    mats = [iou_matrix(p, g) for p, g in zip(preds, gts)]
    ranked = [(-float(c), img, k) for img, p in enumerate(preds) for k, c in enumerate(p.confidences)]
    ranked.sort()
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(ranked), dtype=bool)
    matched = np.zeros(len(ranked))
    for r, (_, img, k) in enumerate(ranked):
        if len(gts[img]) == 0:
            continue
        row = np.where(used[img], -1.0, mats[img][k])
        best = int(np.argmax(row))
        if row[best] >= iou_threshold:
            used[img][best] = True
            tp[r] = True
            matched[r] = row[best]
    scores = np.array([-s for s, _, _ in ranked])
    return MatchResult(scores, tp, matched, sum(len(g) for g in gts))


def average_precision(preds: Sequence[InstanceSet], gts: Sequence[InstanceSet], iou_threshold: float) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    m = match_corpus(preds, gts, iou_threshold)
    if m.n_gt == 0:
        return 1.0 if len(m.is_tp) == 0 else 0.0
    if len(m.is_tp) == 0:
        return 0.0
    cum_tp = np.cumsum(m.is_tp)
    rec = cum_tp / m.n_gt
    prec = cum_tp / np.arange(1, len(cum_tp) + 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_best_iou(preds: Sequence[InstanceSet], gts: Sequence[InstanceSet]) -> float:
    """Mean over GT instances of the best IoU with any predicted instance.

    Summed with ``math.fsum`` so the value does not depend on image order.
    """
    best = []
    for p, g in zip(preds, gts):
        if len(g):
            mat = iou_matrix(p, g)
            best.extend((mat.max(axis=0) if len(p) else np.zeros(len(g))).tolist())
    return math.fsum(best) / len(best) if best else 1.0


METRIC_KEYS = ("ap50", "ap75", "iou", "recall", "precision", "dice")


def _image_sets(prob_volume, gt_volume, threshold):
    preds = [extract_instances(p, threshold) for p in prob_volume]
    gts = [instances_from_mask(g) for g in gt_volume]
    return preds, gts


def _summarize(preds, gts, counts: ConfusionCounts) -> dict:
    m50 = match_corpus(preds, gts, 0.5)
    n_tp = int(m50.is_tp.sum())
    n_pred = len(m50.is_tp)
    return {
        "ap50": average_precision(preds, gts, 0.5),
        "ap75": average_precision(preds, gts, 0.75),
        "iou": mean_best_iou(preds, gts),
        "recall": n_tp / m50.n_gt if m50.n_gt else 0.0,
        "precision": n_tp / n_pred if n_pred else 0.0,
        "dice": dice(counts),
    }, {"n_gt": m50.n_gt, "n_pred": n_pred, "n_tp": n_tp}


def evaluate_run(pred_volumes: Mapping[str, np.ndarray], gt_volumes: Mapping[str, np.ndarray],
                 threshold: float = 0.5, config: dict | None = None) -> dict:
    """Detection and segmentation metrics over volumes keyed by id.

    Detection recall/precision count predictions matched at IoU >= 0.5;
    ``iou`` is the mean best-overlap IoU per GT instance; Dice pools pixel
    counts over the whole corpus.
    """
    if set(pred_volumes) != set(gt_volumes):
        raise ValueError(f"volume ids differ: {sorted(set(pred_volumes) ^ set(gt_volumes))}")
    all_preds, all_gts = [], []
    total = ConfusionCounts(0, 0, 0, 0)
    per_volume = []
    for vid in sorted(gt_volumes):
        prob = np.asarray(pred_volumes[vid], dtype=np.float64)
        gt = np.asarray(gt_volumes[vid])
        check_same_shape(prob, gt)
        preds, gts = _image_sets(prob, gt, threshold)
        counts = confusion((prob >= threshold).astype(np.uint8), (gt == 1).astype(np.uint8))
        metrics, n = _summarize(preds, gts, counts)
        per_volume.append({"id": vid, **metrics, "counts": n})
        all_preds += preds
        all_gts += gts
        total = total + counts
    aggregate, n = _summarize(all_preds, all_gts, total)
    return {
        "config": config or {},
        "threshold": threshold,
        "iou_definition": "mean over GT instances of best-overlap IoU",
        "per_volume": per_volume,
        "aggregate": aggregate,
        "counts": n,
    }
