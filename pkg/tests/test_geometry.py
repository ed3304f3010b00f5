import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activeloop.geometry import (Box3D, bev_corners, bev_iou, box_distance, iou_3d, normalize_yaw,
                                 points_in_box)


def mc_bev_iou(a, b, n, rng):
    """Monte-Carlo IoU: sample the union's bounding rectangle, test containment in each footprint."""
    ca, cb = bev_corners(a), bev_corners(b)
    pts = np.vstack([ca, cb])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    xy = rng.uniform(lo, hi, size=(n, 2))

    def inside(box):
        d = xy - np.array(box.center[:2])
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        u = c * d[:, 0] + s * d[:, 1]
        v = -s * d[:, 0] + c * d[:, 1]
        return (np.abs(u) <= box.dims[0] / 2) & (np.abs(v) <= box.dims[1] / 2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def unit_square(yaw=0.0, x=0.0, y=0.0):
    return Box3D((x, y, 0.5), (1.0, 1.0, 1.0), yaw)


def test_identical_and_disjoint():
    a = Box3D((1, 2, 0.5), (4, 2, 1.5), 0.3)
    assert bev_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-12)
    far = Box3D((20, 2, 0.5), (4, 2, 1.5), 0.3)
    assert bev_iou(a, far) == 0.0


def test_octagon_analytic():
    # square rotated 45 degrees over the same square: octagon of area 2(sqrt2 - 1)
    inter = 2 * (math.sqrt(2) - 1)
    expected = inter / (2 - inter)
    got = bev_iou(unit_square(0.0), unit_square(math.pi / 4))
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.7071, abs=1e-3)


def test_octagon_monte_carlo(rng):
    est = mc_bev_iou(unit_square(0.0), unit_square(math.pi / 4), 10**6, rng)
    assert est == pytest.approx(0.7071, abs=0.01)


def test_square_yaw_period():
    a = unit_square(0.2)
    for shift in (math.pi / 2, math.pi, -math.pi / 2):
        assert bev_iou(a, unit_square(0.2 + shift)) == pytest.approx(1.0, abs=1e-12)
    # a non-square footprint is only pi-periodic
    r = Box3D((0, 0, 0), (3, 1, 1), 0.2)
    assert bev_iou(r, Box3D((0, 0, 0), (3, 1, 1), 0.2 + math.pi)) == pytest.approx(1.0, abs=1e-12)
    assert bev_iou(r, Box3D((0, 0, 0), (3, 1, 1), 0.2 + math.pi / 2)) < 0.5
    assert bev_iou(r, Box3D((0, 0, 0), (1, 3, 1), 0.2 + math.pi / 2)) == pytest.approx(1.0, abs=1e-12)


def test_iou_3d_interval_cases():
    a = Box3D((0, 0, 0.5), (1, 1, 1), 0.0)
    touching = Box3D((0, 0, 1.5), (1, 1, 1), 0.0)
    assert iou_3d(a, touching) == 0.0
    half = Box3D((0, 0, 1.0), (1, 1, 1), 0.0)
    assert iou_3d(a, half) == pytest.approx(0.5 / 1.5, abs=1e-12)


def test_points_in_box_examples():
    box = Box3D((2, -1, 1), (2, 2, 2), math.pi / 2)
    assert points_in_box(np.zeros((0, 4)), box) == 0
    assert points_in_box(np.array([[2.0, -1.0, 1.0, 0.5]]), box) == 1
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * 0.9
    cloud = np.column_stack([corners + np.array(box.center), np.zeros(8)])
    assert points_in_box(cloud, box) == 8
    # boundary is outside
    assert points_in_box(np.array([[3.0, -1.0, 1.0, 0.0]]), box) == 0


def test_points_in_box_rotation_invariant(rng):
    box = Box3D((3, 1, 0.8), (4, 2, 1.6), 0.4)
    cloud = np.column_stack([rng.uniform(-1, 7, 2000), rng.uniform(-3, 5, 2000),
                             rng.uniform(0, 2, 2000), rng.uniform(0, 1, 2000)])
    n = points_in_box(cloud, box)
    for phi in (0.3, 1.7, -2.5):
        c, s = math.cos(phi), math.sin(phi)
        rot = cloud.copy()
        rot[:, 0] = c * cloud[:, 0] - s * cloud[:, 1]
        rot[:, 1] = s * cloud[:, 0] + c * cloud[:, 1]
        cx, cy = c * 3 - s * 1, s * 3 + c * 1
        assert points_in_box(rot, Box3D((cx, cy, 0.8), (4, 2, 1.6), 0.4 + phi)) == n


def test_box_distance():
    assert box_distance(Box3D((0, 0, 1), (1, 1, 1))) == 0.0
    assert box_distance(Box3D((3, 4, 0), (1, 1, 1))) == 5.0
    assert box_distance(Box3D((-6, 8, 2), (1, 1, 1))) == 10.0


def test_yaw_normalized():
    assert normalize_yaw(math.pi) == -math.pi
    assert -math.pi <= Box3D((0, 0, 0), (1, 1, 1), 7.0).yaw < math.pi
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1))


boxes = st.builds(
    lambda x, y, z, l, w, h, yaw: Box3D((x, y, z), (l, w, h), yaw),
    st.floats(-5, 5), st.floats(-5, 5), st.floats(-1, 1),
    st.floats(0.2, 5), st.floats(0.2, 5), st.floats(0.2, 3), st.floats(-4, 4),
)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    for f in (bev_iou, iou_3d):
        ab, ba = f(a, b), f(b, a)
        assert 0.0 <= ab <= 1.0
        assert ab == pytest.approx(ba, abs=1e-9)
