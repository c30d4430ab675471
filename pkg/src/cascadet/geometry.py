"""Axis-aligned box arithmetic.

Boxes are corner form ``(x_min, y_min, x_max, y_max)`` in continuous pixel
coordinates (no ``+1`` convention). Deltas use the center-offset / log-scale
parameterization with unit variances:

    dx = (gx - ax) / aw      dw = ln(gw / aw)
    dy = (gy - ay) / ah      dh = ln(gh / ah)

Every operation has an array form working on ``(N, 4)`` float arrays, which
is what the rest of the package uses, and a scalar form on :class:`Box`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# exp(40) ~ 2e17; keeps decode finite without affecting any realistic delta
MAX_LOG_SCALE = 40.0


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"negative box extent: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def to_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dw: float
    dh: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoxDelta":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def as_boxes(boxes) -> np.ndarray:
    """Coerce to a float64 ``(N, 4)`` array (an empty input gives ``(0, 4)``)."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return arr.reshape(-1, 4)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays.

    Pairs whose union area is zero get IoU 0.
    """
    a = as_boxes(a)
    b = as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _center_form(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Row-wise deltas taking ``anchors[i]`` onto ``gt[i]``.

    Raises:
        ValueError: if any gt or anchor has a non-positive width or height.
    """
    gt = as_boxes(gt)
    anchors = as_boxes(anchors)
    gx, gy, gw, gh = _center_form(gt)
    ax, ay, aw, ah = _center_form(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("encode requires anchors with positive width and height")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("encode requires ground truth with positive width and height")
    return np.stack(
        [(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; returns corner-form boxes."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = as_boxes(anchors)
    ax, ay, aw, ah = _center_form(anchors)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = as_boxes(boxes)
    out = boxes.copy()
    out[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return out


def hflip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    """Mirror boxes about the vertical axis of an image ``width`` pixels wide."""
    boxes = as_boxes(boxes)
    return np.stack([width - boxes[:, 2], boxes[:, 1], width - boxes[:, 0], boxes[:, 3]], axis=1)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.to_array(), b.to_array())[0, 0])


def encode(gt: Box, anchor: Box) -> BoxDelta:
    return BoxDelta.from_array(encode_boxes(gt.to_array(), anchor.to_array())[0])


def decode(delta: BoxDelta, anchor: Box) -> Box:
    if not all(math.isfinite(v) for v in (delta.dx, delta.dy, delta.dw, delta.dh)):
        raise ValueError(f"non-finite delta: {delta}")
    if anchor.width <= 0 or anchor.height <= 0:
        raise ValueError("decode requires an anchor with positive width and height")
    return Box.from_array(decode_boxes(delta.to_array(), anchor.to_array())[0])


def clip(b: Box, width: float, height: float) -> Box:
    if width < 0 or height < 0:
        raise ValueError("clip bounds must be non-negative")
    return Box.from_array(clip_boxes(b.to_array(), width, height)[0])


def hflip(b: Box, width: float) -> Box:
    return Box.from_array(hflip_boxes(b.to_array(), width)[0])
