"""Level-selective two-step classification and regression.

Three anchor sets drive everything:

* ``omega`` - anchors on the two-step classification levels (default P2-P4);
  their first-step score ``p`` decides whether they survive.
* ``psi`` - anchors on the two-step regression levels (default P5-P7); the
  first-step deltas ``x`` move them before the second step.
* ``phi`` - survivors of the first-step filter. An anchor in ``omega`` is
  dropped when its background confidence ``1 - p`` exceeds the negative
  threshold; anchors outside ``omega`` always survive.

The second step scores (``q``) and regresses (``t``) only survivors, relative
to the refined anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .anchors import AnchorPyramid
from .geometry import as_boxes, decode_boxes
from .losses import sigmoid
from .matcher import STEP1, STEP2, MatchResult, MatchThresholds, imbalance_ratio, match


@dataclass(frozen=True)
class CascadeConfig:
    stc_levels: tuple[str, ...] = ("P2", "P3", "P4")
    str_levels: tuple[str, ...] = ("P5", "P6", "P7")
    negative_threshold: float = 0.99
    step1: MatchThresholds = field(default_factory=lambda: STEP1)
    step2: MatchThresholds = field(default_factory=lambda: STEP2)

    def __post_init__(self):
        object.__setattr__(self, "stc_levels", tuple(self.stc_levels))
        object.__setattr__(self, "str_levels", tuple(self.str_levels))
        if not 0.0 < self.negative_threshold <= 1.0:
            raise ValueError(f"negative_threshold must lie in (0, 1], got {self.negative_threshold}")

    def to_dict(self) -> dict:
        return {
            "stc_levels": list(self.stc_levels),
            "str_levels": list(self.str_levels),
            "negative_threshold": self.negative_threshold,
            "step1": [self.step1.theta_n, self.step1.theta_p],
            "step2": [self.step2.theta_n, self.step2.theta_p],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CascadeConfig":
        known = {"stc_levels", "str_levels", "negative_threshold", "step1", "step2"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cascade keys: {sorted(unknown)}")
        kw = dict(d)
        for step in ("step1", "step2"):
            if step in kw:
                kw[step] = MatchThresholds(*kw[step])
        return cls(**kw)


def build_selection_sets(pyramid: AnchorPyramid, config: CascadeConfig):
    """Boolean masks ``(omega, psi)`` selected purely by pyramid level.

    Raises:
        KeyError: a configured level does not exist in the pyramid.
    """
    return pyramid.level_mask(config.stc_levels), pyramid.level_mask(config.str_levels)


def stc_filter(p, omega, negative_threshold: float) -> np.ndarray:
    """Survivor mask: drop anchor ``i`` in ``omega`` iff ``1 - p[i] > threshold``."""
    p = np.asarray(p, dtype=np.float64)
    return ~omega | ((1.0 - p) <= negative_threshold)


def str_refine(x, anchors, psi) -> np.ndarray:
    """Anchors with the ``psi`` rows replaced by ``decode(x, anchor)``.

    Raises:
        ValueError: a delta on a selected anchor is not finite.
    """
    anchors = as_boxes(anchors)
    x = np.asarray(x, dtype=np.float64).reshape(-1, 4)
    refined = anchors.copy()
    if psi.any():
        if not np.all(np.isfinite(x[psi])):
            raise ValueError("non-finite first-step delta on a refined anchor")
        refined[psi] = decode_boxes(x[psi], anchors[psi])
    return refined


@dataclass(frozen=True, eq=False)
class ModelOutputs:
    """Raw per-anchor predictions aligned with the anchor order."""

    p_logit: np.ndarray
    q_logit: np.ndarray
    x: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.q_logit)


@dataclass(frozen=True, eq=False)
class CascadeBatch:
    anchors: np.ndarray
    refined: np.ndarray
    p_logit: np.ndarray
    q_logit: np.ndarray
    x: np.ndarray
    t: np.ndarray
    omega: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    match1: MatchResult
    match2: MatchResult

    @property
    def p(self) -> np.ndarray:
        return sigmoid(self.p_logit)

    @property
    def q(self) -> np.ndarray:
        return sigmoid(self.q_logit)


def assemble_batch(
    pyramid: AnchorPyramid,
    gts,
    outputs: ModelOutputs,
    config: CascadeConfig,
    *,
    match1: MatchResult | None = None,
    base_match2: MatchResult | None = None,
    refined: np.ndarray | None = None,
) -> CascadeBatch:
    """Bind model outputs, selection sets and both matching steps.

    Step one matches the original anchors with ``config.step1``; step two
    matches the refined anchors with ``config.step2``. Callers looping over
    the same scene may pass the (fixed) step-one match as ``match1`` and a
    step-two match of the *original* anchors as ``base_match2``; then only
    the refined rows are rematched. ``refined`` may be passed when the
    caller already moved the anchors with ``outputs.x``.

    Raises:
        ValueError: output lengths do not match the anchor count.
    """
    n = len(pyramid)
    for name in ("p_logit", "q_logit", "x", "t"):
        if len(getattr(outputs, name)) != n:
            raise ValueError(f"{name} has {len(getattr(outputs, name))} rows, expected {n}")
    gts = as_boxes(gts)
    omega, psi = build_selection_sets(pyramid, config)
    phi = stc_filter(sigmoid(outputs.p_logit), omega, config.negative_threshold)
    if refined is None:
        refined = str_refine(outputs.x, pyramid.boxes, psi)
    m1 = match1 if match1 is not None else match(pyramid.boxes, gts, config.step1)
    if base_match2 is None:
        m2 = match(refined, gts, config.step2)
    else:
        m2 = _rematch_rows(base_match2, refined, gts, psi, config.step2)
    return CascadeBatch(
        anchors=pyramid.boxes,
        refined=refined,
        p_logit=np.asarray(outputs.p_logit, dtype=np.float64),
        q_logit=np.asarray(outputs.q_logit, dtype=np.float64),
        x=np.asarray(outputs.x, dtype=np.float64),
        t=np.asarray(outputs.t, dtype=np.float64),
        omega=omega,
        psi=psi,
        phi=phi,
        match1=m1,
        match2=m2,
    )


def _rematch_rows(base: MatchResult, boxes, gts, rows, th) -> MatchResult:
    if not rows.any():
        return base
    sub = match(boxes[rows], gts, th)
    labels = base.labels.copy()
    gt_index = base.gt_index.copy()
    max_iou = base.max_iou.copy()
    targets = base.targets.copy()
    labels[rows] = sub.labels
    gt_index[rows] = sub.gt_index
    max_iou[rows] = sub.max_iou
    targets[rows] = sub.targets
    return MatchResult(labels, gt_index, max_iou, targets)


def concat_batches(batches) -> CascadeBatch:
    """Stack per-image batches into one mini-batch (anchor axis concatenated)."""
    batches = list(batches)
    if len(batches) == 1:
        return batches[0]
    cat = np.concatenate

    def cat_match(ms):
        return MatchResult(
            cat([m.labels for m in ms]),
            cat([m.gt_index for m in ms]),
            cat([m.max_iou for m in ms]),
            cat([m.targets for m in ms]),
        )

    return CascadeBatch(
        anchors=cat([b.anchors for b in batches]),
        refined=cat([b.refined for b in batches]),
        p_logit=cat([b.p_logit for b in batches]),
        q_logit=cat([b.q_logit for b in batches]),
        x=cat([b.x for b in batches]),
        t=cat([b.t for b in batches]),
        omega=cat([b.omega for b in batches]),
        psi=cat([b.psi for b in batches]),
        phi=cat([b.phi for b in batches]),
        match1=cat_match([b.match1 for b in batches]),
        match2=cat_match([b.match2 for b in batches]),
    )


def imbalance_before_after(batch: CascadeBatch) -> tuple[float, float]:
    """Second-step negatives per positive over all anchors vs. over survivors."""
    everything = np.ones(len(batch.phi), dtype=bool)
    return imbalance_ratio(batch.match2, everything), imbalance_ratio(batch.match2, batch.phi)
