"""IoU-band anchor assignment.

An anchor is positive when its best IoU over the ground truths reaches
``theta_p``, negative below ``theta_n``, and ignored in between. Unmatched
ground truths are not force-assigned to their best anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_boxes, encode_boxes, iou_matrix

POSITIVE = 1
NEGATIVE = 0
IGNORED = -1


@dataclass(frozen=True)
class MatchThresholds:
    theta_n: float
    theta_p: float

    def __post_init__(self):
        if not 0.0 <= self.theta_n <= self.theta_p <= 1.0:
            raise ValueError(
                f"need 0 <= theta_n <= theta_p <= 1, got ({self.theta_n}, {self.theta_p})"
            )


STEP1 = MatchThresholds(0.3, 0.7)
STEP2 = MatchThresholds(0.4, 0.5)


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Per-anchor assignment.

    ``gt_index`` is -1 and ``targets`` rows are NaN for anchors that are not
    positive.
    """

    labels: np.ndarray
    gt_index: np.ndarray
    max_iou: np.ndarray
    targets: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels == POSITIVE

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    def counts(self, mask: np.ndarray | None = None) -> dict[str, int]:
        labels = self.labels if mask is None else self.labels[mask]
        return {
            "positive": int(np.count_nonzero(labels == POSITIVE)),
            "negative": int(np.count_nonzero(labels == NEGATIVE)),
            "ignored": int(np.count_nonzero(labels == IGNORED)),
        }


def match(anchors, gts, th: MatchThresholds) -> MatchResult:
    anchors = as_boxes(anchors)
    gts = as_boxes(gts)
    n = len(anchors)
    if n == 0:
        raise ValueError("match needs at least one anchor")
    targets = np.full((n, 4), np.nan)
    gt_index = np.full(n, -1, dtype=np.int64)
    if len(gts) == 0:
        return MatchResult(np.full(n, NEGATIVE, dtype=np.int8), gt_index, np.zeros(n), targets)

    ious = iou_matrix(anchors, gts)
    best = ious.argmax(axis=1)  # first maximum -> lowest gt index on ties
    best_iou = ious[np.arange(n), best]
    labels = np.full(n, IGNORED, dtype=np.int8)
    labels[best_iou < th.theta_n] = NEGATIVE
    pos = best_iou >= th.theta_p
    labels[pos] = POSITIVE
    if pos.any():
        gt_index[pos] = best[pos]
        targets[pos] = encode_boxes(gts[best[pos]], anchors[pos])
    return MatchResult(labels, gt_index, best_iou, targets)


def imbalance_ratio(m: MatchResult, mask: np.ndarray | None = None) -> float:
    """Negatives per positive, ignoring ignored anchors.

    Raises:
        ValueError: no positive anchors.
    """
    c = m.counts(mask)
    if c["positive"] == 0:
        raise ValueError("imbalance ratio undefined without positive anchors")
    return c["negative"] / c["positive"]


def format_ratio(ratio: float) -> str:
    """Render a negatives-per-positive ratio as ``1:N``."""
    return f"1:{ratio:.0f}"
