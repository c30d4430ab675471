import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadet.geometry import (
    Box,
    BoxDelta,
    clip,
    clip_boxes,
    decode,
    decode_boxes,
    encode,
    encode_boxes,
    hflip,
    iou,
    iou_matrix,
)

coord = st.floats(-500, 500, allow_nan=False)
extent = st.floats(0.5, 400, allow_nan=False)


@st.composite
def boxes(draw):
    x, y = draw(coord), draw(coord)
    return Box(x, y, x + draw(extent), y + draw(extent))


def test_iou_basic():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(10, 0, 20, 10)) == 0.0
    assert iou(a, Box(5, 0, 15, 10)) == pytest.approx(50 / 150)


def test_iou_zero_area():
    p = Box(3, 3, 3, 3)
    assert iou(p, p) == 0.0
    assert iou(p, Box(0, 0, 10, 10)) == 0.0


def test_iou_matrix_shapes():
    assert iou_matrix(np.zeros((0, 4)), np.zeros((3, 4))).shape == (0, 3)
    assert iou_matrix(np.zeros((2, 4)), np.zeros((0, 4))).shape == (2, 0)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


@given(boxes(), st.floats(-200, 200), st.floats(-200, 200))
def test_iou_translation_invariant(a, dx, dy):
    b = Box(a.x_min + 3, a.y_min - 2, a.x_max + 7, a.y_max + 1)
    shift = lambda z: Box(z.x_min + dx, z.y_min + dy, z.x_max + dx, z.y_max + dy)  # noqa: E731
    assert iou(shift(a), shift(b)) == pytest.approx(iou(a, b), abs=1e-9)


@given(boxes(), boxes())
@settings(max_examples=200)
def test_encode_decode_roundtrip(gt, anchor):
    back = decode(encode(gt, anchor), anchor)
    scale = max(1.0, abs(gt.x_max), abs(gt.y_max), abs(gt.x_min), abs(gt.y_min))
    for u, v in zip(back.to_array(), gt.to_array()):
        assert u == pytest.approx(v, abs=1e-9 * scale)


def test_encode_known_values():
    d = encode(Box(2, 2, 6, 10), Box(0, 0, 4, 4))
    assert d.dx == pytest.approx(0.5)
    assert d.dy == pytest.approx(1.0)
    assert d.dw == pytest.approx(0.0)
    assert d.dh == pytest.approx(math.log(2))


def test_decode_zero_delta_is_identity():
    a = np.array([[1.0, 2.0, 5.0, 9.0], [0.0, 0.0, 16.0, 20.0]])
    np.testing.assert_allclose(decode_boxes(np.zeros((2, 4)), a), a)


def test_encode_rejects_degenerate():
    with pytest.raises(ValueError):
        encode_boxes(np.array([[0, 0, 0, 5.0]]), np.array([[0, 0, 4, 4.0]]))
    with pytest.raises(ValueError):
        encode(Box(0, 0, 4, 4), Box(1, 1, 1, 3))


def test_decode_rejects_nonfinite():
    with pytest.raises(ValueError):
        decode(BoxDelta(math.nan, 0, 0, 0), Box(0, 0, 4, 4))


def test_decode_huge_scale_stays_finite():
    out = decode_boxes(np.array([[0, 0, 1e6, 1e6]]), np.array([[0, 0, 4, 4.0]]))
    assert np.all(np.isfinite(out))


def test_box_validation():
    with pytest.raises(ValueError):
        Box(5, 0, 4, 1)
    with pytest.raises(ValueError):
        Box(0, 0, math.inf, 1)


def test_clip():
    assert clip(Box(-5, -5, 20, 30), 10, 12) == Box(0, 0, 10, 12)
    out = clip_boxes(np.array([[50.0, 50, 60, 60]]), 40, 40)
    np.testing.assert_array_equal(out, [[40, 40, 40, 40]])


@given(boxes(), st.floats(1, 2000))
def test_hflip_involution(b, width):
    back = hflip(hflip(b, width), width)
    np.testing.assert_allclose(back.to_array(), b.to_array(), atol=1e-9 * max(1.0, width, abs(b.x_max)))
    f = hflip(b, width)
    assert f.width == pytest.approx(b.width)
