"""Inference: first-step filter, anchor refinement, second-step decode,
top-k, greedy NMS, final top-k."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .anchors import AnchorPyramid
from .cascade import CascadeConfig, ModelOutputs, build_selection_sets, stc_filter, str_refine
from .geometry import Box, as_boxes, box_areas, clip_boxes, decode_boxes
from .losses import sigmoid


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


@dataclass(frozen=True)
class InferenceConfig:
    pre_nms_top_k: int | None = 2000
    nms_iou: float = 0.5
    final_top_k: int | None = 750

    def __post_init__(self):
        for k in (self.pre_nms_top_k, self.final_top_k):
            if k is not None and k <= 0:
                raise ValueError("top-k values must be positive")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "pre_nms_top_k": self.pre_nms_top_k,
            "nms_iou": self.nms_iou,
            "final_top_k": self.final_top_k,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "InferenceConfig":
        unknown = set(d) - {"pre_nms_top_k", "nms_iou", "final_top_k"}
        if unknown:
            raise ValueError(f"unknown inference keys: {sorted(unknown)}")
        return cls(**d)


def nms_indices(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    A box is suppressed when its IoU with a kept box is strictly greater than
    ``iou_threshold``. Equal scores keep input order. With ``max_keep`` the
    search stops after that many boxes, which gives the same prefix as a full
    run.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms got non-finite scores")
    order = np.argsort(-scores, kind="stable")
    x0, y0, x1, y1 = boxes.T
    areas = box_areas(boxes)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if len(keep) == max_keep:
            break
        rest = order[1:]
        if not rest.size:
            break
        # same arithmetic as iou_matrix, one row at a time
        w = np.clip(np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0.0, None)
        h = np.clip(np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0.0, None)
        inter = w * h
        union = areas[i] + areas[rest] - inter
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=union > 0)
        order = rest[ov <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box.to_array() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]


def detect_arrays(
    pyramid: AnchorPyramid,
    outputs: ModelOutputs,
    cascade: CascadeConfig,
    config: InferenceConfig,
    image_size: tuple[float, float] | None = None,
):
    """Array form of :func:`run_pipeline`: ``(boxes (K, 4), scores (K,))``."""
    omega, psi = build_selection_sets(pyramid, cascade)
    keep = stc_filter(sigmoid(outputs.p_logit), omega, cascade.negative_threshold)
    anchors = str_refine(outputs.x, pyramid.boxes, psi)
    idx = np.flatnonzero(keep)
    boxes = decode_boxes(np.asarray(outputs.t)[idx], anchors[idx])
    scores = sigmoid(np.asarray(outputs.q_logit)[idx])
    if image_size is None:
        image_size = (pyramid.config.input_size, pyramid.config.input_size)
    boxes = clip_boxes(boxes, *image_size)
    order = np.argsort(-scores, kind="stable")
    if config.pre_nms_top_k is not None:
        order = order[: config.pre_nms_top_k]
    boxes, scores = boxes[order], scores[order]
    kept = nms_indices(boxes, scores, config.nms_iou, config.final_top_k)
    return boxes[kept], scores[kept]


def run_pipeline(
    pyramid: AnchorPyramid,
    outputs: ModelOutputs,
    cascade: CascadeConfig = CascadeConfig(),
    config: InferenceConfig = InferenceConfig(),
    image_size: tuple[float, float] | None = None,
) -> list[Detection]:
    """Detections for one image, highest score first.

    Anchors on the two-step classification levels whose first-step background
    confidence exceeds the negative threshold are dropped; anchors on the
    two-step regression levels are moved by the first-step deltas; survivors
    are scored by the second-step probability and decoded with the
    second-step deltas, clipped to the image, then cut to ``pre_nms_top_k``,
    suppressed, and cut to ``final_top_k``.
    """
    boxes, scores = detect_arrays(pyramid, outputs, cascade, config, image_size)
    return [Detection(Box.from_array(b), float(s)) for b, s in zip(boxes, scores)]
