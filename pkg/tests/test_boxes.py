import pytest
from hypothesis import given, strategies as st

from precarious.boxes import BBox, iou, iou_matrix, to_array
from oracles import raster_iou

coord = st.integers(-20, 20)
size = st.integers(1, 15)
box = st.tuples(coord, coord, size, size)


def test_iou_examples():
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)
    assert iou(BBox(3, 4, 5, 6), BBox(3, 4, 5, 6)) == 1.0
    assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 1, 1)) == 0.0
    assert iou(BBox(0, 0, 1, 1), BBox(1, 0, 1, 1)) == 0.0  # touching edges


def test_non_positive_size_rejected():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 1)
    with pytest.raises(ValueError):
        iou((0, 0, 1, -1), (0, 0, 1, 1))


@given(box, box)
def test_iou_matches_pixel_count(a, b):
    assert abs(iou(a, b) - raster_iou(a, b)) < 1e-9


@given(box, box, st.floats(0.1, 10))
def test_iou_symmetric_and_scale_invariant(a, b, s):
    v = iou(a, b)
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    scaled = iou(tuple(s * x for x in a), tuple(s * x for x in b))
    assert scaled == pytest.approx(v, abs=1e-9)
    assert 0.0 <= v <= 1.0


def test_iou_matrix_shape_and_json():
    a = to_array([BBox(0, 0, 2, 2), (1, 1, 2, 2)])
    m = iou_matrix(a, a[:1])
    assert m.shape == (2, 1)
    assert BBox.from_json(BBox(1.5, 2, 3, 4).to_json()) == BBox(1.5, 2, 3, 4)
    assert to_array([]).shape == (0, 4)
