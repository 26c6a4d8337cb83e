"""Rotated 3D box geometry: footprints, convex clipping, IoU and distances.

Boxes live in the ego frame. ``z`` is the height of the box center and the
footprint is the (x, y) rectangle rotated by ``yaw`` about the center.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0
    category: int = 0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.l, self.w, self.h, self.yaw, self.vx, self.vy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box field in {self}")
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got l={self.l} w={self.w} h={self.h}")
        if not (-math.pi <= self.yaw < math.pi):
            raise ValueError(f"yaw {self.yaw} outside [-pi, pi)")
        if int(self.category) != self.category or self.category < 0:
            raise ValueError(f"category must be a non-negative integer, got {self.category}")

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def geometry_key(self) -> tuple[float, ...]:
        return (self.x, self.y, self.z, self.l, self.w, self.h, self.yaw)


def yaw_normalize(theta: float) -> float:
    """Wrap an angle into the half-open interval [-pi, pi)."""
    if not math.isfinite(theta):
        raise ValueError(f"cannot normalize non-finite angle {theta}")
    if -math.pi <= theta < math.pi:
        return float(theta)
    r = math.fmod(theta + math.pi, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    r -= math.pi
    # fmod/+2pi rounding can land exactly on +pi
    if r >= math.pi:
        r -= TWO_PI
    if r < -math.pi:
        r = -math.pi
    return r


def wrap_angle_diff(a: float, b: float) -> float:
    """Absolute angular difference folded into [0, pi]."""
    return abs(yaw_normalize(a - b))


def bev_footprint(box: Box3D) -> np.ndarray:
    """Counter-clockwise (4, 2) array of the box's bird's-eye-view corners."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    local = ((hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw))
    return np.array([(box.x + c * px - s * py, box.y + s * px + c * py) for px, py in local])


def polygon_area(poly) -> float:
    """Shoelace area; positive for counter-clockwise winding."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def _clip(subject: list, a: tuple, b: tuple) -> list:
    # keep the part of `subject` left of the directed edge a->b
    ax, ay = a
    ex, ey = b[0] - ax, b[1] - ay
    out = []
    n = len(subject)
    for i in range(n):
        p = subject[i]
        q = subject[(i + 1) % n]
        sp = ex * (p[1] - ay) - ey * (p[0] - ax)
        sq = ex * (q[1] - ay) - ey * (q[0] - ax)
        if sp >= 0.0:
            out.append(p)
        if (sp >= 0.0) != (sq >= 0.0):
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def convex_intersection_area(a, b) -> float:
    """Area of the intersection of two convex CCW polygons (Sutherland-Hodgman)."""
    poly = [tuple(map(float, v)) for v in a]
    clip = [tuple(map(float, v)) for v in b]
    m = len(clip)
    for i in range(m):
        if len(poly) < 3:
            return 0.0
        poly = _clip(poly, clip[i], clip[(i + 1) % m])
    if len(poly) < 3:
        return 0.0
    return max(0.0, polygon_area(poly))


def _ordered(a: Box3D, b: Box3D) -> tuple[Box3D, Box3D]:
    # canonical argument order makes IoU exactly symmetric
    return (a, b) if astuple(a) <= astuple(b) else (b, a)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    a, b = _ordered(a, b)
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    return convex_intersection_area(bev_footprint(a), bev_footprint(b))


def iou_bev(a: Box3D, b: Box3D) -> float:
    if a.x == b.x and a.y == b.y and a.l == b.l and a.w == b.w and a.yaw == b.yaw:
        return 1.0
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(1.0, inter / union)


def z_overlap(a: Box3D, b: Box3D) -> float:
    top = min(a.z + 0.5 * a.h, b.z + 0.5 * b.h)
    bot = max(a.z - 0.5 * a.h, b.z - 0.5 * b.h)
    return max(0.0, top - bot)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated 3D IoU: BEV footprint overlap times vertical overlap over union volume."""
    if a.geometry_key() == b.geometry_key():
        return 1.0
    a, b = _ordered(a, b)
    dz = z_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, inter / union)


def center_distance_bev(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def range_to_ego(box: Box3D) -> float:
    return math.hypot(box.x, box.y)


def points_in_box_mask(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points (N, >=3) inside the rotated box, faces inclusive."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros(0, dtype=bool)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.x
    dy = pts[:, 1] - box.y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    dz = pts[:, 2] - box.z
    return (np.abs(lx) <= 0.5 * box.l) & (np.abs(ly) <= 0.5 * box.w) & (np.abs(dz) <= 0.5 * box.h)


def transform_box(box: Box3D, angle: float, tx: float = 0.0, ty: float = 0.0) -> Box3D:
    """Apply a planar rigid motion (rotation about the origin, then translation)."""
    c, s = math.cos(angle), math.sin(angle)
    return Box3D(
        x=c * box.x - s * box.y + tx,
        y=s * box.x + c * box.y + ty,
        z=box.z,
        l=box.l,
        w=box.w,
        h=box.h,
        yaw=yaw_normalize(box.yaw + angle),
        vx=c * box.vx - s * box.vy,
        vy=s * box.vx + c * box.vy,
        category=box.category,
    )
