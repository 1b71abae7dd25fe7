"""Oriented 3D boxes and point cloud primitives.

Conventions used throughout the package:

* Point clouds are float numpy arrays of shape (N, 3), coordinates in
  meters in the sensor frame (x forward, y left, z up).
* Box yaw is measured clockwise about +z and stored in [-pi, pi).
  At yaw 0 the box length ``l`` runs along +y, the width ``w`` along +x
  and the height ``h`` along z.
* Box centers are volumetric centroids (not bottom-face centers).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_angle(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return float(np.mod(angle + np.pi, 2.0 * np.pi) - np.pi)


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate points clockwise about the z axis.

    (x, y) maps to (x*cos + y*sin, -x*sin + y*cos); z is untouched.
    Point count and order are preserved.
    """
    pts = np.asarray(points, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    out = pts.copy()
    out[..., 0] = pts[..., 0] * c + pts[..., 1] * s
    out[..., 1] = -pts[..., 0] * s + pts[..., 1] * c
    return out


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: volumetric center, (h, w, l) size, clockwise yaw."""

    center: np.ndarray
    size: tuple[float, float, float]  # (h, w, l) in meters
    yaw: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        if not np.all(np.isfinite(center)):
            raise ValueError(f"non-finite box center {center}")
        h, w, l = self.size
        if not (h > 0 and w > 0 and l > 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", (float(h), float(w), float(l)))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def h(self) -> float:
        return self.size[0]

    @property
    def w(self) -> float:
        return self.size[1]

    @property
    def l(self) -> float:
        return self.size[2]


@dataclass
class Detection:
    """A localizer output: predicted object location plus confidence."""

    location: np.ndarray
    score: float
    box: Box3D | None = None

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=float).reshape(3)
        if not np.isfinite(self.score) or not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")


def box_bev_corners(box: Box3D) -> np.ndarray:
    """The 4 bird's-eye-view corners of a box, counterclockwise, shape (4, 2)."""
    w, l = box.w, box.l
    local = np.array(
        [[-w / 2, -l / 2], [w / 2, -l / 2], [w / 2, l / 2], [-w / 2, l / 2]]
    )
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    # clockwise rotation by yaw, same map as rotate_z
    rotated = np.column_stack(
        [local[:, 0] * c + local[:, 1] * s, -local[:, 0] * s + local[:, 1] * c]
    )
    return rotated + box.center[:2]


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 vertices of the oriented cuboid, shape (8, 3).

    First the four bottom corners (z = center.z - h/2), then the four top
    corners in the same BEV order.
    """
    bev = box_bev_corners(box)
    z_lo = box.center[2] - box.h / 2
    z_hi = box.center[2] + box.h / 2
    bottom = np.column_stack([bev, np.full(4, z_lo)])
    top = np.column_stack([bev, np.full(4, z_hi)])
    return np.vstack([bottom, top])


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as (M, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex counterclockwise one."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []
        # side >= 0 means on or left of the directed edge a->b
        sides = [ex * (p[1] - a[1]) - ey * (p[0] - a[0]) for p in inputs]
        for j, p in enumerate(inputs):
            q = inputs[(j + 1) % len(inputs)]
            sp, sq = sides[j], sides[(j + 1) % len(inputs)]
            if sp >= 0.0:
                output.append(p)
            if (sp > 0.0 > sq) or (sp < 0.0 < sq):
                t = sp / (sp - sq)
                output.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.array(output) if output else np.empty((0, 2))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of the two yawed rectangles."""
    pa = box_bev_corners(a)
    pb = box_bev_corners(b)
    inter = _polygon_area(_clip_polygon(pa, pb))
    area_a = _polygon_area(pa)
    area_b = _polygon_area(pb)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: exact BEV polygon intersection times z-interval overlap.

    Volumes are computed from the same BEV polygons so identical boxes
    yield exactly 1.0.
    """
    pa = box_bev_corners(a)
    pb = box_bev_corners(b)
    inter_area = _polygon_area(_clip_polygon(pa, pb))
    if inter_area <= 0.0:
        return 0.0
    # one shared z-interval arithmetic so identical boxes give exactly 1.0
    a_lo, a_hi = a.center[2] - a.h / 2, a.center[2] + a.h / 2
    b_lo, b_hi = b.center[2] - b.h / 2, b.center[2] + b.h / 2
    dz = min(a_hi, b_hi) - max(a_lo, b_lo)
    if dz <= 0.0:
        return 0.0
    inter = inter_area * dz
    vol_a = _polygon_area(pa) * (a_hi - a_lo)
    vol_b = _polygon_area(pb) * (b_hi - b_lo)
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of the points inside the (closed) box."""
    local = rotate_z(np.asarray(points, dtype=float) - box.center, -box.yaw)
    return (
        (np.abs(local[:, 0]) <= box.w / 2)
        & (np.abs(local[:, 1]) <= box.l / 2)
        & (np.abs(local[:, 2]) <= box.h / 2)
    )
