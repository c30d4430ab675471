"""Desk-scale stand-in for the detection network.

Backbone features are replaced by synthetic per-anchor vectors, and the heads
by linear maps, so the cascade machinery can be trained end to end with exact
gradients. Each anchor carries two feature views: one read by the first step
and one by the second step. The classifier is a single weight vector applied
to both views; the two regressors are separate.

Feature layout (``dim`` >= 5)::

    [0]      best IoU of the anchor with any face, scaled + classification noise
    [1:5]    deltas to the best-overlapping face, soft-clipped at ``delta_knee``
             and scaled, + regression noise
    [5:dim]  pure noise distractors

Noise is drawn independently per view and grows on the lower pyramid levels.
On the two-step regression levels the second view is read again at the
anchor moved by the first step (:meth:`AnchorFeatures.reread`), so the second
step sees the refined anchor. The soft clip keeps a single linear step from
fully localizing a badly placed anchor, which leaves room for the second.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .anchors import AnchorPyramid
from .cascade import (
    CascadeConfig,
    ModelOutputs,
    assemble_batch,
    build_selection_sets,
    str_refine,
)
from .dataio import Scene
from .geometry import encode_boxes, iou_matrix
from .losses import FocalParams, LossCounts, LossReport, total_loss
from .matcher import match

logger = logging.getLogger(__name__)

MODEL_FORMAT = "cascadet-toy-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class FeatureParams:
    dim: int = 16
    noise: float = 1.0
    cls_noise: float = 0.12
    reg_noise: float = 0.03
    cls_gain: float = 4.0
    reg_gain: float = 10.0
    delta_knee: float = 0.15
    # per-level noise multiplier, finest level first; the last entry repeats
    level_noise: tuple[float, ...] = (1.6, 1.4, 1.2, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "level_noise", tuple(self.level_noise))
        if self.dim < 5:
            raise ValueError("feature dim must be at least 5")
        if self.noise < 0 or self.cls_noise < 0 or self.reg_noise < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass(frozen=True, eq=False)
class AnchorFeatures:
    """Both feature views for every anchor of one scene.

    ``faces``, ``noise2`` and ``params`` let the second view be re-read at
    moved anchor positions (see :meth:`second_at`); they are ``None`` for
    features built directly from arrays.
    """

    first: np.ndarray
    second: np.ndarray
    faces: np.ndarray | None = None
    noise2: np.ndarray | None = None
    level_mult: np.ndarray | None = None
    params: FeatureParams | None = None

    def __len__(self) -> int:
        return len(self.first)

    def reread(self, boxes, rows) -> "Reread | None":
        """Second-view rows recomputed at ``boxes[rows]``.

        The overlap and regression signals follow the new box while the
        distractors and the noise drawn for each anchor stay as they were, so
        the result is still deterministic. Returns ``None`` if nothing
        changes.
        """
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0 or self.faces is None:
            return None
        boxes = np.asarray(boxes)[rows]
        s, raw, partner = _best_face(boxes, self.faces)
        p = self.params
        d = p.delta_knee * np.tanh(raw / p.delta_knee)
        mult = self.level_mult[rows]
        z = self.noise2[rows]
        out = self.second[rows].copy()
        out[:, 0] = p.cls_gain * (s + p.cls_noise * mult * z[:, 0])
        out[:, 1:5] = p.reg_gain * (d + p.reg_noise * mult[:, None] * z[:, 1:5])
        return Reread(out, boxes, raw, partner)

    def second_at(self, boxes, rows) -> np.ndarray:
        """Full second view with ``rows`` re-read at ``boxes[rows]``."""
        new = self.reread(boxes, rows)
        if new is None:
            return self.second
        out = self.second.copy()
        out[rows] = new.features
        return out


@dataclass(frozen=True, eq=False)
class Reread:
    """Second-view rows read at moved anchors.

    Attributes:
        features: the new feature rows.
        boxes: the boxes they were read at.
        raw: unclipped deltas toward the best-overlapping face (zero where
            nothing overlaps).
        partner: that face, NaN where nothing overlaps.
    """

    features: np.ndarray
    boxes: np.ndarray
    raw: np.ndarray
    partner: np.ndarray


@dataclass(frozen=True, eq=False)
class Prediction:
    """Side information of :meth:`ToyModel.predict`.

    Attributes:
        refined: anchors after the first-step move.
        rows: anchors whose second view was re-read.
        reread: what the second step read on those rows, or ``None``.
    """

    refined: np.ndarray
    rows: np.ndarray
    reread: Reread | None


def _valid_faces(scene: Scene) -> np.ndarray:
    faces = scene.faces[~scene.ignore]
    return faces[(faces[:, 2] > faces[:, 0]) & (faces[:, 3] > faces[:, 1])]


def _best_face(anchors: np.ndarray, faces: np.ndarray):
    """Best IoU per anchor, unclipped deltas toward that face (zero where
    nothing overlaps) and the face itself (NaN where nothing overlaps)."""
    n = len(anchors)
    s, d, partner = np.zeros(n), np.zeros((n, 4)), np.full((n, 4), np.nan)
    if len(faces) == 0:
        return s, d, partner
    ious = iou_matrix(anchors, faces)
    best = ious.argmax(axis=1)
    s = ious[np.arange(n), best]
    hit = s > 0
    partner[hit] = faces[best[hit]]
    d[hit] = encode_boxes(partner[hit], anchors[hit])
    return s, d, partner


def _signals(anchors: np.ndarray, faces: np.ndarray, knee: float):
    s, raw, _ = _best_face(anchors, faces)
    return s, knee * np.tanh(raw / knee)


def _compose(s, d, z, mult, params: FeatureParams) -> np.ndarray:
    f = np.empty((len(s), params.dim))
    f[:, 0] = params.cls_gain * (s + params.cls_noise * mult * z[:, 0])
    f[:, 1:5] = params.reg_gain * (d + params.reg_noise * mult[:, None] * z[:, 1:5])
    f[:, 5:] = z[:, 5:]
    return f


def overlap_signals(scene: Scene, pyramid: AnchorPyramid, knee: float = FeatureParams.delta_knee):
    """Best IoU per anchor and clipped deltas toward the best-overlapping face.

    Faces flagged invalid are not considered. Anchors touching no face get
    zero deltas.
    """
    return _signals(pyramid.boxes, _valid_faces(scene), knee)


def featurize(
    scene: Scene, pyramid: AnchorPyramid, seed: int, params: FeatureParams = FeatureParams()
) -> AnchorFeatures:
    """Synthesize both feature views for every anchor of ``pyramid``.

    Row ``i`` depends only on ``(seed, i)`` and the scene, so features are
    reproducible and independent of how many anchors follow.
    """
    faces = _valid_faces(scene)
    s, d = _signals(pyramid.boxes, faces, params.delta_knee)
    mult = np.array(params.level_noise)[np.minimum(pyramid.level, len(params.level_noise) - 1)]
    zs = []
    for view in (1, 2):
        rng = np.random.default_rng([seed, view])
        zs.append(rng.standard_normal((len(s), params.dim)) * params.noise)
    return AnchorFeatures(
        _compose(s, d, zs[0], mult, params),
        _compose(s, d, zs[1], mult, params),
        faces,
        zs[1],
        mult,
        params,
    )


@dataclass(eq=False)
class ToyModel:
    cls_w: np.ndarray
    cls_b: float
    reg1_w: np.ndarray
    reg1_b: np.ndarray
    reg2_w: np.ndarray
    reg2_b: np.ndarray

    @classmethod
    def init(cls, dim: int, prior: float = 0.02) -> "ToyModel":
        return cls(
            np.zeros(dim),
            -math.log((1.0 - prior) / prior),
            np.zeros((dim, 4)),
            np.zeros(4),
            np.zeros((dim, 4)),
            np.zeros(4),
        )

    @property
    def dim(self) -> int:
        return len(self.cls_w)

    def forward(self, feats: AnchorFeatures) -> ModelOutputs:
        # one classifier for both steps
        h1 = feats.first @ np.column_stack([self.cls_w, self.reg1_w])
        h2 = feats.second @ np.column_stack([self.cls_w, self.reg2_w])
        return ModelOutputs(
            p_logit=h1[:, 0] + self.cls_b,
            q_logit=h2[:, 0] + self.cls_b,
            x=h1[:, 1:] + self.reg1_b,
            t=h2[:, 1:] + self.reg2_b,
        )

    def predict(
        self, feats: AnchorFeatures, pyramid: AnchorPyramid, config: CascadeConfig
    ) -> tuple[ModelOutputs, Prediction]:
        """Two-stage forward pass.

        The first step runs on the first view. Anchors on the two-step
        regression levels are moved by its deltas, and the second view is
        re-read there before the second step runs.

        Returns:
            The outputs and a :class:`Prediction` recording what the second
            step actually read.
        """
        h1 = feats.first @ np.column_stack([self.cls_w, self.reg1_w])
        w2 = np.column_stack([self.cls_w, self.reg2_w])
        h2 = feats.second @ w2
        x = h1[:, 1:] + self.reg1_b
        _, psi = build_selection_sets(pyramid, config)
        refined = str_refine(x, pyramid.boxes, psi)
        rows = np.flatnonzero(psi)
        reread = feats.reread(refined, rows)
        if reread is not None:
            h2[rows] = reread.features @ w2
        out = ModelOutputs(
            p_logit=h1[:, 0] + self.cls_b,
            q_logit=h2[:, 0] + self.cls_b,
            x=x,
            t=h2[:, 1:] + self.reg2_b,
        )
        return out, Prediction(refined, rows, reread)

    def params(self) -> list[np.ndarray]:
        return [self.cls_w, np.array([self.cls_b]), self.reg1_w, self.reg1_b, self.reg2_w, self.reg2_b]

    def with_params(self, flat: Sequence[np.ndarray]) -> "ToyModel":
        w, b, r1w, r1b, r2w, r2b = flat
        return ToyModel(w.copy(), float(np.asarray(b).ravel()[0]), r1w.copy(), r1b.copy(), r2w.copy(), r2b.copy())

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "dim": self.dim,
            "cls_w": self.cls_w.tolist(),
            "cls_b": self.cls_b,
            "reg1_w": self.reg1_w.tolist(),
            "reg1_b": self.reg1_b.tolist(),
            "reg2_w": self.reg2_w.tolist(),
            "reg2_b": self.reg2_b.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a toy model file (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported toy model version {d.get('version')!r}")
        dim = int(d["dim"])
        m = cls(
            np.asarray(d["cls_w"], dtype=np.float64),
            float(d["cls_b"]),
            np.asarray(d["reg1_w"], dtype=np.float64).reshape(dim, 4),
            np.asarray(d["reg1_b"], dtype=np.float64),
            np.asarray(d["reg2_w"], dtype=np.float64).reshape(dim, 4),
            np.asarray(d["reg2_b"], dtype=np.float64),
        )
        if m.cls_w.shape != (dim,):
            raise ValueError("cls_w length does not match dim")
        return m

    def save(self, fh: IO[str]) -> None:
        json.dump(self.to_dict(), fh)
        fh.write("\n")

    @classmethod
    def load(cls, fh: IO[str]) -> "ToyModel":
        return cls.from_dict(json.load(fh))


@dataclass(eq=False)
class TrainItem:
    """One training scene with its features and cached fixed matches."""

    pyramid: AnchorPyramid
    gts: np.ndarray
    features: AnchorFeatures
    match1: object = None
    base_match2: object = None


def make_item(scene: Scene, pyramid: AnchorPyramid, features: AnchorFeatures, config: CascadeConfig):
    gts = scene.faces[~scene.ignore]
    return TrainItem(
        pyramid,
        gts,
        features,
        match(pyramid.boxes, gts, config.step1),
        match(pyramid.boxes, gts, config.step2),
    )


@dataclass(frozen=True)
class TrainHyper:
    """Gradient-descent settings.

    ``learning_rate`` is the initial step. After an accepted step the step
    grows by ``step_growth``; a trial step that fails the sufficient-decrease
    test is halved and retried, but never below ``learning_rate`` halved
    ``full_backtracks`` times. If no such step passes, the same search (at
    most ``max_backtracks`` halvings, with its own step size) runs with the
    first-step regressor held fixed; if that fails too, training stops and
    the trace repeats the last loss.
    """

    learning_rate: float = 0.5
    epochs: int = 40
    focal: FocalParams = field(default_factory=FocalParams)
    normalize_str: bool = True
    prior: float = 0.02
    step_growth: float = 1.1
    full_backtracks: int = 4
    max_backtracks: int = 12
    armijo: float = 1e-4


# parameter blocks updated when the full step is blocked (see train)
_HOLD_FIRST_REGRESSOR = (True, True, False, False, True, True)


class TrainingDiverged(RuntimeError):
    pass


def _encode_vjp(v, e, x):
    """``v @ d encode(g, decode(x, a)) / dx`` given ``e = encode(g, decode(x, a))``."""
    return np.column_stack(
        [
            -v[:, 0] * np.exp(-x[:, 2]),
            -v[:, 1] * np.exp(-x[:, 3]),
            -v[:, 0] * e[:, 0] - v[:, 2],
            -v[:, 1] * e[:, 1] - v[:, 3],
        ]
    )


def _iou_grad(b, g):
    """Rowwise ``d IoU(b, g) / d b`` for overlapping pairs of boxes."""
    iw = np.minimum(b[:, 2], g[:, 2]) - np.maximum(b[:, 0], g[:, 0])
    ih = np.minimum(b[:, 3], g[:, 3]) - np.maximum(b[:, 1], g[:, 1])
    bw, bh = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    inter = iw * ih
    union = bw * bh + (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1]) - inter
    d_inter = np.column_stack(
        [
            -ih * (b[:, 0] > g[:, 0]),
            -iw * (b[:, 1] > g[:, 1]),
            ih * (b[:, 2] < g[:, 2]),
            iw * (b[:, 3] < g[:, 3]),
        ]
    )
    d_area = np.column_stack([-bh, -bw, bh, bw])
    d_union = d_area - d_inter
    return (d_inter * union[:, None] - inter[:, None] * d_union) / (union * union)[:, None]


def _decode_vjp(v, box, x):
    """``v @ d decode(x, a) / dx`` given ``box = decode(x, a)``."""
    bw, bh = box[:, 2] - box[:, 0], box[:, 3] - box[:, 1]
    aw, ah = bw * np.exp(-x[:, 2]), bh * np.exp(-x[:, 3])
    return np.column_stack(
        [
            aw * (v[:, 0] + v[:, 2]),
            ah * (v[:, 1] + v[:, 3]),
            0.5 * bw * (v[:, 2] - v[:, 0]),
            0.5 * bh * (v[:, 3] - v[:, 1]),
        ]
    )


def _through_refinement(dq, dt, targets, new: Reread, x, model: "ToyModel", params: FeatureParams):
    """Loss gradient reaching the first-step deltas through the moved anchors.

    Moving an anchor changes its re-read features, which feed both the
    shared classifier and the second regressor, and the second-step
    regression target of positives.
    """
    out = np.zeros_like(x)
    raw = new.raw
    hit = ~np.isnan(new.partner[:, 0])
    w2 = np.column_stack([model.cls_w, model.reg2_w])
    df = np.column_stack([dq, dt]) @ w2[:5].T
    live = hit & df.any(axis=1)
    if live.any():
        sech2 = 1.0 - np.tanh(raw[live] / params.delta_knee) ** 2
        out[live] = _encode_vjp(params.reg_gain * sech2 * df[live, 1:5], raw[live], x[live])
        ds = params.cls_gain * df[live, 0:1] * _iou_grad(new.boxes[live], new.partner[live])
        out[live] += _decode_vjp(ds, new.boxes[live], x[live])
    pos = dt.any(axis=1)
    if pos.any():
        out[pos] -= _encode_vjp(dt[pos], targets[pos], x[pos])
    return out


def loss_and_grads(model: ToyModel, items: Sequence[TrainItem], config: CascadeConfig, hyper: TrainHyper):
    """Total loss of ``items`` taken as one mini-batch, and its gradient.

    Positive counts used for normalization are pooled over all items.

    Returns:
        ``(loss, [dw, db, dreg1_w, dreg1_b, dreg2_w, dreg2_b], report)``
    """
    staged = []
    counts = LossCounts(0, 0, 0, 0)
    for item in items:
        out, pred = model.predict(item.features, item.pyramid, config)
        batch = assemble_batch(
            item.pyramid,
            item.gts,
            out,
            config,
            match1=item.match1,
            base_match2=item.base_match2,
            refined=pred.refined,
        )
        counts = counts + LossCounts.of(batch)
        staged.append((item, batch, pred))

    grads = [np.zeros_like(p, dtype=np.float64) for p in model.params()]
    stc = reg = 0.0
    for item, batch, pred in staged:
        rep, g = total_loss(batch, hyper.focal, normalize_str=hyper.normalize_str, counts=counts)
        stc += rep.stc_loss
        reg += rep.str_loss
        f1, f2 = item.features.first, item.features.second
        if pred.reread is not None:
            rows = pred.rows
            g.x[rows] += _through_refinement(
                g.q_logit[rows],
                g.t[rows],
                batch.match2.targets[rows],
                pred.reread,
                batch.x[rows],
                model,
                item.features.params,
            )
        g1 = np.column_stack([g.p_logit, g.x])
        g2 = np.column_stack([g.q_logit, g.t])
        if pred.reread is not None:
            # the re-read rows replace the stored second view
            g2_rows = g2[pred.rows].copy()
            g2[pred.rows] = 0.0
        h1 = f1.T @ g1
        h2 = f2.T @ g2
        if pred.reread is not None:
            h2 += pred.reread.features.T @ g2_rows
            g2[pred.rows] = g2_rows
        grads[0] += h1[:, 0] + h2[:, 0]
        grads[1] += g1[:, 0].sum() + g2[:, 0].sum()
        grads[2] += h1[:, 1:]
        grads[3] += g1[:, 1:].sum(axis=0)
        grads[4] += h2[:, 1:]
        grads[5] += g2[:, 1:].sum(axis=0)
    report = LossReport(stc, reg, stc + reg, counts.cls1, counts.cls2)
    return report.total, grads, report


def train(
    items: Sequence[TrainItem],
    config: CascadeConfig = CascadeConfig(),
    hyper: TrainHyper = TrainHyper(),
    model: ToyModel | None = None,
) -> tuple[ToyModel, list[float]]:
    """Full-batch gradient descent on the total loss with backtracking steps.

    Selection sets and second-step matches depend on the parameters, so the
    objective is only piecewise smooth; a step is accepted only if it lowers
    the loss by the Armijo margin, which makes the trace nonincreasing.

    Returns:
        The trained model and the loss trace: the initial loss followed by
        the loss after each epoch.

    Raises:
        ValueError: empty dataset.
        TrainingDiverged: the loss became non-finite.
    """
    if not items:
        raise ValueError("training needs at least one scene")
    if model is None:
        model = ToyModel.init(items[0].features.first.shape[1], hyper.prior)
    params = [p.astype(np.float64, copy=True) for p in model.params()]

    def evaluate(ps):
        try:
            loss, grads, _ = loss_and_grads(model.with_params(ps), items, config, hyper)
        except ValueError as exc:
            raise TrainingDiverged(str(exc)) from exc
        return loss, grads

    loss, grads = evaluate(params)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"initial loss is {loss}")
    trace = [loss]
    # one step size per direction: the full gradient, and the gradient with
    # the first-step regressor held fixed. Moving that regressor shifts
    # anchors across matching thresholds, where the loss jumps; when such a
    # jump blocks the full step, the held direction keeps making progress.
    steps = [hyper.learning_rate, hyper.learning_rate]
    floors = [hyper.learning_rate * 0.5**hyper.full_backtracks, 0.0]
    plans = ((None, hyper.full_backtracks), (_HOLD_FIRST_REGRESSOR, hyper.max_backtracks))
    for epoch in range(hyper.epochs):
        if hyper.learning_rate <= 0:
            trace.append(loss)
            continue
        accepted = False
        for k, (mask, tries) in enumerate(plans):
            d = grads if mask is None else [g if keep else np.zeros_like(g) for g, keep in zip(grads, mask)]
            dsq = sum(float(np.sum(g * g)) for g in d)
            if dsq == 0.0:
                continue
            step = steps[k]
            for _ in range(tries + 1):
                if step < floors[k]:
                    break
                trial = [p - step * g for p, g in zip(params, d)]
                t_loss, t_grads = evaluate(trial)
                if math.isfinite(t_loss) and t_loss <= loss - hyper.armijo * step * dsq:
                    params, loss, grads = trial, t_loss, t_grads
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                steps[k] = step * hyper.step_growth
                break
            if k > 0:
                steps[k] = step
        if not accepted:
            logger.debug("epoch %d: no step lowers the loss; stopping", epoch)
            trace.extend([loss] * (hyper.epochs - epoch))
            break
        trace.append(loss)
    logger.debug("trained %d epochs: loss %.6g -> %.6g", hyper.epochs, trace[0], trace[-1])
    return model.with_params(params), trace


# ---------------------------------------------------------------------------
# receptive fields


@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    stride: int = 1


def _default_branches():
    return (
        (Conv(1, 1), Conv(1, 3), Conv(1, 1)),
        (Conv(1, 1), Conv(3, 1), Conv(1, 1)),
        (Conv(1, 1), Conv(1, 5), Conv(1, 1)),
        (Conv(1, 1), Conv(5, 1), Conv(1, 1)),
    )


@dataclass(frozen=True)
class RfeSpec:
    """Branch layer chains plus an optional identity shortcut."""

    branches: tuple[tuple[Conv, ...], ...] = field(default_factory=_default_branches)
    shortcut: bool = True

    def __post_init__(self):
        for chain in self.branches:
            for c in chain:
                if c.kh <= 0 or c.kw <= 0 or c.stride <= 0:
                    raise ValueError(f"invalid layer {c}")


def receptive_field(chain: Sequence[Conv]) -> tuple[int, int]:
    """(height, width) extent of a layer chain; each layer adds (k-1) * jump."""
    h = w = 1
    jump = 1
    for c in chain:
        h += (c.kh - 1) * jump
        w += (c.kw - 1) * jump
        jump *= c.stride
    return h, w


def rfe_receptive_fields(spec: RfeSpec = RfeSpec()) -> list[tuple[int, int]]:
    """Sorted multiset of per-branch extents, the shortcut contributing (1, 1)."""
    out = [receptive_field(chain) for chain in spec.branches]
    if spec.shortcut:
        out.append((1, 1))
    return sorted(out)
