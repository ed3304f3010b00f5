"""Oriented 3D boxes, BEV / 3D IoU and point containment.

Point clouds are plain ``(N, 4)`` float arrays with columns ``x, y, z,
reflectance``; the sensor sits at the frame origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = (yaw + math.pi) % TWO_PI - math.pi
    # float modulo can land exactly on +pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


@dataclass(frozen=True)
class Box3D:
    """Yaw-rotated cuboid ``(px, py, pz, l, w, h, yaw)`` with a 0-based class id.

    ``l`` runs along the heading direction, ``w`` across it. The box is not
    canonicalized: yaw + pi with the same l/w, or yaw + pi/2 with l and w
    swapped, describe the same footprint and give IoU 1 against each other.
    """

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0
    class_id: int = -1

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        dims = tuple(float(d) for d in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise ValueError("center and dims need three components")
        if not all(math.isfinite(v) for v in center + dims + (float(self.yaw),)):
            raise ValueError(f"non-finite box parameters: {center} {dims} {self.yaw}")
        if min(dims) <= 0:
            raise ValueError(f"box dims must be positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))

    @classmethod
    def from_array(cls, values, class_id: int = -1) -> "Box3D":
        v = [float(x) for x in values]
        return cls(tuple(v[0:3]), tuple(v[3:6]), v[6], class_id)

    def to_array(self) -> np.ndarray:
        return np.array([*self.center, *self.dims, self.yaw], dtype=np.float64)

    def with_class(self, class_id: int) -> "Box3D":
        return Box3D(self.center, self.dims, self.yaw, class_id)

    @property
    def volume(self) -> float:
        l, w, h = self.dims
        return l * w * h

    @property
    def bev_area(self) -> float:
        return self.dims[0] * self.dims[1]


def bev_corners(box: Box3D) -> np.ndarray:
    """Footprint corners as a (4, 2) array in counter-clockwise order."""
    l, w, _ = box.dims
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array(
        [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
    )
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array(box.center[:2])


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertices."""
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return 0.5 * area


def clip_convex(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs, output = output, []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.dims[0], a.dims[1])
    rb = 0.5 * math.hypot(b.dims[0], b.dims[1])
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    if dx * dx + dy * dy >= (ra + rb) ** 2:
        return 0.0
    poly = clip_convex(bev_corners(a).tolist(), bev_corners(b).tolist())
    return max(polygon_area(poly), 0.0)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two rotated footprints in the x-y plane."""
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.bev_area + b.bev_area - inter
    return min(max(inter / union, 0.0), 1.0)


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.center[2] - a.dims[2] / 2, b.center[2] - b.dims[2] / 2)
    hi = min(a.center[2] + a.dims[2] / 2, b.center[2] + b.dims[2] / 2)
    return max(hi - lo, 0.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    dz = vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    return min(max(inter / (a.volume + b.volume - inter), 0.0), 1.0)


def to_box_frame(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Express xyz of ``points`` in the box frame (origin at center, x along heading)."""
    xyz = np.asarray(points, dtype=np.float64)[:, :3] - np.array(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = c * xyz[:, 0] + s * xyz[:, 1]
    v = -s * xyz[:, 0] + c * xyz[:, 1]
    return np.column_stack([u, v, xyz[:, 2]])


def points_in_box_mask(cloud: np.ndarray, box: Box3D) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.size == 0:
        return np.zeros(0, dtype=bool)
    local = to_box_frame(cloud, box)
    half = np.array(box.dims) / 2
    # boundary counts as outside
    return np.all(np.abs(local) < half, axis=1)


def points_in_box(cloud: np.ndarray, box: Box3D) -> int:
    return int(points_in_box_mask(cloud, box).sum())


def box_distance(box: Box3D) -> float:
    """BEV range of the box center from the sensor origin."""
    return math.hypot(box.center[0], box.center[1])
