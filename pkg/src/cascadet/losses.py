"""Focal / smooth-L1 losses and the two-step classification and regression
objectives, with analytic gradients.

Gradients are taken with respect to the pre-sigmoid logits and the raw
predicted deltas. Selection masks and matching results inside a batch are
treated as constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e) / (1.0 + e)


def _log_sigmoids(z):
    """``(p, 1 - p, log p, log(1 - p))`` for logits ``z``, all stable."""
    e = np.exp(-np.abs(z))
    lse = np.log1p(e)
    log_p = np.minimum(z, 0.0) - lse
    log_q = np.minimum(-z, 0.0) - lse
    inv = 1.0 / (1.0 + e)
    pos = z >= 0
    p = np.where(pos, inv, e * inv)
    q = np.where(pos, e * inv, inv)
    return p, q, log_p, log_q


def focal_loss(logits, labels, fp: FocalParams = FocalParams()):
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logit.

    Args:
        logits: pre-sigmoid scores.
        labels: 1 for face, 0 for background (same shape as ``logits``).
        fp: alpha / gamma.

    Returns:
        ``(loss, dloss_dlogit)`` arrays shaped like ``logits``.

    Raises:
        ValueError: a logit is not finite.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("focal_loss got non-finite logits")
    y = np.asarray(labels) == 1
    p, q, log_p, log_q = _log_sigmoids(z)
    a, g = fp.alpha, fp.gamma

    if g == 2.0:
        pos_w, neg_w = q * q, p * p
    else:
        pos_w, neg_w = q**g, p**g
    loss = np.where(y, -a * pos_w * log_p, -(1.0 - a) * neg_w * log_q)
    grad = np.where(
        y,
        a * pos_w * (g * p * log_p - q),
        (1.0 - a) * neg_w * (p - g * q * log_q),
    )
    return loss, grad


def smooth_l1(x):
    """Elementwise smooth L1 (transition at |x| = 1) and its derivative."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    small = ax < 1.0
    value = np.where(small, 0.5 * x * x, ax - 0.5)
    deriv = np.where(small, x, np.sign(x))
    return value, deriv


@dataclass(frozen=True)
class LossReport:
    stc_loss: float
    str_loss: float
    total: float
    n_s1: int
    n_s2: int


@dataclass(frozen=True, eq=False)
class LossGrads:
    """Gradient of the total loss w.r.t. every per-anchor model output."""

    p_logit: np.ndarray
    q_logit: np.ndarray
    x: np.ndarray
    t: np.ndarray


@dataclass(frozen=True)
class LossCounts:
    """Positive counts used to normalize the loss terms.

    ``cls1``/``cls2`` count first-step positives in the classification
    selection set and second-step positives among survivors; ``reg1``/``reg2``
    the same for the regression terms. Counts of several batches add up, which
    lets a mini-batch split across scenes share one normalization.
    """

    cls1: int
    cls2: int
    reg1: int
    reg2: int

    @classmethod
    def of(cls, batch) -> "LossCounts":
        pos1 = batch.match1.labels == 1
        n2 = int(np.count_nonzero(batch.phi & (batch.match2.labels == 1)))
        return cls(
            int(np.count_nonzero(batch.omega & pos1)),
            n2,
            int(np.count_nonzero(batch.psi & pos1)),
            n2,
        )

    def __add__(self, other: "LossCounts") -> "LossCounts":
        return LossCounts(
            self.cls1 + other.cls1, self.cls2 + other.cls2, self.reg1 + other.reg1, self.reg2 + other.reg2
        )


def _norm(n: int, step: str) -> float:
    if n == 0:
        logger.debug("no positive anchors in %s; normalizing by 1", step)
        return 1.0
    return float(n)


def stc_loss(
    batch, fp: FocalParams = FocalParams(), *, with_grad: bool = False, counts: LossCounts | None = None
):
    """First-step focal loss over the selection set plus second-step focal loss
    over the survivors, each normalized by its step's positive count.

    Ignored anchors contribute nothing. ``counts`` overrides the batch's own
    positive counts. Returns the loss, or ``(loss, dp_logit, dq_logit)`` when
    ``with_grad`` is set.
    """
    l1, l2 = batch.match1.labels, batch.match2.labels
    sel1 = batch.omega & (l1 >= 0)
    sel2 = batch.phi & (l2 >= 0)
    if counts is None:
        counts = LossCounts.of(batch)
    n1 = _norm(counts.cls1, "first step")
    n2 = _norm(counts.cls2, "second step")

    loss1, g1 = focal_loss(batch.p_logit[sel1], l1[sel1], fp)
    loss2, g2 = focal_loss(batch.q_logit[sel2], l2[sel2], fp)
    value = float(loss1.sum()) / n1 + float(loss2.sum()) / n2
    if not with_grad:
        return value
    dp = np.zeros(len(batch.p_logit))
    dq = np.zeros(len(batch.q_logit))
    dp[sel1] = g1 / n1
    dq[sel2] = g2 / n2
    return value, dp, dq


def str_loss(
    batch, *, normalize: bool = False, with_grad: bool = False, counts: LossCounts | None = None
):
    """Smooth-L1 regression loss over positive anchors of both steps.

    First step: positives (step-one labels) inside the regression selection
    set, predicted ``x`` vs. targets on the original anchors. Second step:
    positives (step-two labels) among the survivors, predicted ``t`` vs.
    targets on the refined anchors. Unnormalized unless ``normalize`` is set,
    in which case each term is divided by its positive count (clamped to 1).

    Raises:
        ValueError: a positive anchor has no regression target.
    """
    pos1 = batch.psi & (batch.match1.labels == 1)
    pos2 = batch.phi & (batch.match2.labels == 1)
    g1 = batch.match1.targets[pos1]
    g2 = batch.match2.targets[pos2]
    if np.isnan(g1).any() or np.isnan(g2).any():
        raise ValueError("positive anchor without a regression target")
    if counts is None:
        counts = LossCounts(0, 0, int(pos1.sum()), int(pos2.sum()))
    c1 = 1.0 / _norm(counts.reg1, "first step") if normalize else 1.0
    c2 = 1.0 / _norm(counts.reg2, "second step") if normalize else 1.0

    v1, d1 = smooth_l1(batch.x[pos1] - g1)
    v2, d2 = smooth_l1(batch.t[pos2] - g2)
    value = c1 * float(v1.sum()) + c2 * float(v2.sum())
    if not with_grad:
        return value
    dx = np.zeros_like(batch.x, dtype=np.float64)
    dt = np.zeros_like(batch.t, dtype=np.float64)
    dx[pos1] = c1 * d1
    dt[pos2] = c2 * d2
    return value, dx, dt


def total_loss(
    batch,
    fp: FocalParams = FocalParams(),
    *,
    normalize_str: bool = False,
    counts: LossCounts | None = None,
):
    """Sum of the classification and regression objectives.

    Returns:
        ``(LossReport, LossGrads)``.
    """
    if counts is None:
        counts = LossCounts.of(batch)
    stc, dp, dq = stc_loss(batch, fp, with_grad=True, counts=counts)
    reg, dx, dt = str_loss(batch, normalize=normalize_str, with_grad=True, counts=counts)
    report = LossReport(stc_loss=stc, str_loss=reg, total=stc + reg, n_s1=counts.cls1, n_s2=counts.cls2)
    return report, LossGrads(dp, dq, dx, dt)
