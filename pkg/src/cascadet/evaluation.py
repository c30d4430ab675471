"""Detection evaluation: greedy TP/FP assignment, PR curves, AP, false
positives at fixed recall, and AP over a sweep of IoU thresholds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import as_boxes, iou_matrix

TP = 1
FP = 0
SKIP = -1  # matched only an ignored ground truth


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8)
    recall_levels: tuple[float, ...] = (0.1, 0.3, 0.5, 0.8, 0.9, 0.95)
    interpolation: str = "all_points"

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(self.iou_thresholds))
        object.__setattr__(self, "recall_levels", tuple(self.recall_levels))
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if any(not 0.0 <= r <= 1.0 for r in self.recall_levels):
            raise ValueError("recall levels must lie in [0, 1]")
        if self.interpolation not in ("all_points", "11_point"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "recall_levels": list(self.recall_levels),
            "interpolation": self.interpolation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalConfig":
        unknown = set(d) - {"iou_thresholds", "recall_levels", "interpolation"}
        if unknown:
            raise ValueError(f"unknown eval keys: {sorted(unknown)}")
        return cls(**d)


def match_detections(det_boxes, gt_boxes, iou_threshold: float, gt_ignore=None) -> np.ndarray:
    """Flag each detection TP / FP / SKIP.

    Detections must already be sorted by descending score. Each takes the
    still-unmatched valid ground truth of highest IoU (lowest index on ties)
    if that IoU reaches the threshold. Otherwise it is SKIP when it reaches
    the threshold on an ignored ground truth, and FP if not.
    """
    det_boxes = as_boxes(det_boxes)
    gt_boxes = as_boxes(gt_boxes)
    flags = np.full(len(det_boxes), FP, dtype=np.int8)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return flags
    ignore = np.zeros(len(gt_boxes), bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = ignore.copy()
    # a detection overlapping nothing above the threshold is a plain FP
    for i in np.flatnonzero(ious.max(axis=1) >= iou_threshold):
        row = np.where(taken, -1.0, ious[i])
        j = int(row.argmax())
        if row[j] >= iou_threshold:
            flags[i] = TP
            taken[j] = True
        elif ignore.any() and ious[i, ignore].max() >= iou_threshold:
            flags[i] = SKIP
    return flags


@dataclass(frozen=True, eq=False)
class PrCurve:
    """Operating points, one per score-sorted detection prefix.

    Attributes:
        recall, precision: per-point values.
        thresholds: score of the last detection in each prefix.
        tp, fp: cumulative counts.
        n_gt: number of valid ground truths.
    """

    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_gt: int

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist(), self.thresholds.tolist()))


def pr_curve(scores, flags, n_gt: int) -> PrCurve:
    """Build a curve from pooled detection scores and TP/FP/SKIP flags.

    Ties in score keep the given order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags)
    keep = flags != SKIP
    scores, flags = scores[keep], flags[keep]
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    tp = np.cumsum(flags == TP)
    fp = np.cumsum(flags == FP)
    recall = tp / n_gt if n_gt > 0 else np.zeros(len(tp))
    precision = tp / np.maximum(tp + fp, 1)
    return PrCurve(recall, precision, scores, tp, fp, n_gt)


def average_precision(curve: PrCurve, interpolation: str = "all_points") -> float:
    """Area under the precision envelope.

    ``all_points`` integrates the envelope (max precision at recall >= r)
    exactly over recall; ``11_point`` averages it at r = 0, 0.1, ..., 1.
    """
    if curve.n_gt == 0 or len(curve.recall) == 0:
        return 0.0
    rec = np.concatenate([[0.0], curve.recall, [1.0]])
    pre = np.concatenate([[0.0], curve.precision, [0.0]])
    env = np.maximum.accumulate(pre[::-1])[::-1]
    if interpolation == "11_point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            total += env[np.searchsorted(rec, r, side="left")] if r <= curve.recall[-1] else 0.0
        return total / 11.0
    if interpolation != "all_points":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    steps = np.flatnonzero(rec[1:] != rec[:-1]) + 1
    return float(np.sum((rec[steps] - rec[steps - 1]) * env[steps]))


def fp_at_recall(curve: PrCurve, recall_levels: Sequence[float]) -> list[int | None]:
    """False positives in the shortest prefix reaching each recall level.

    ``None`` marks a level the curve never reaches.
    """
    out: list[int | None] = []
    for r in recall_levels:
        need = math.ceil(r * curve.n_gt - 1e-9)
        if need <= 0:
            out.append(0)
            continue
        hit = np.flatnonzero(curve.tp >= need)
        out.append(int(curve.fp[hit[0]]) if hit.size else None)
    return out


@dataclass(eq=False)
class ImageResult:
    """Detections and ground truth for one image."""

    det_boxes: np.ndarray
    det_scores: np.ndarray
    gt_boxes: np.ndarray
    gt_ignore: np.ndarray = field(default=None)

    def __post_init__(self):
        self.det_boxes = as_boxes(self.det_boxes)
        self.det_scores = np.asarray(self.det_scores, dtype=np.float64).reshape(-1)
        self.gt_boxes = as_boxes(self.gt_boxes)
        if self.gt_ignore is None:
            self.gt_ignore = np.zeros(len(self.gt_boxes), dtype=bool)
        self.gt_ignore = np.asarray(self.gt_ignore, dtype=bool)


def evaluate(images: Sequence[ImageResult], iou_threshold: float) -> PrCurve:
    """Pool per-image greedy matches into one PR curve."""
    scores, flags = [], []
    n_gt = 0
    for im in images:
        order = np.argsort(-im.det_scores, kind="stable")
        scores.append(im.det_scores[order])
        flags.append(match_detections(im.det_boxes[order], im.gt_boxes, iou_threshold, im.gt_ignore))
        n_gt += int(np.count_nonzero(~im.gt_ignore))
    if not scores:
        return pr_curve([], [], 0)
    return pr_curve(np.concatenate(scores), np.concatenate(flags), n_gt)


def ap_iou_sweep(images: Sequence[ImageResult], config: EvalConfig = EvalConfig()) -> dict[float, float]:
    return {
        t: average_precision(evaluate(images, t), config.interpolation) for t in config.iou_thresholds
    }
