"""Box representations, camera projection, and IoU/overlap math.

Conventions:
  - 2D boxes are axis-aligned in image pixels, (x1, y1) top-left and
    (x2, y2) bottom-right.
  - 3D boxes live in the LiDAR frame (x forward, y left, z up), centered
    at (cx, cy, cz), with length along the heading given by yaw (rotation
    about the vertical axis).
  - 3D overlap is rotated-footprint polygon intersection in the ground
    plane times vertical extent overlap (the usual BEV convention).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ProjectionError(ValueError):
    """A 3D box cannot be projected into a usable image box."""


class BehindCamera(ProjectionError):
    """At least one box corner has non-positive depth."""


class OutsideImage(ProjectionError):
    """All corners project in front of the camera but outside the image."""


def _require_finite(name, *values):
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} has non-finite component {v!r}")


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image-plane box with x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        _require_finite("Box2D", self.x1, self.y1, self.x2, self.y2)
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate Box2D {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Box3D:
    """Upright 3D box; yaw is normalized to (-pi, pi] at construction."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        _require_finite(
            "Box3D", self.cx, self.cy, self.cz,
            self.length, self.width, self.height, self.yaw,
        )
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError(f"non-positive dimensions in Box3D {self}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    def footprint(self) -> np.ndarray:
        """Ground-plane corners (4, 2), counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = self.length / 2.0, self.width / 2.0
        local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def corners(self) -> np.ndarray:
        """All 8 corners as (8, 3): footprint at bottom then top face."""
        foot = self.footprint()
        zs = np.array([self.cz - self.height / 2.0, self.cz + self.height / 2.0])
        out = np.empty((8, 3))
        out[:4, :2] = foot
        out[:4, 2] = zs[0]
        out[4:, :2] = foot
        out[4:, 2] = zs[1]
        return out

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class Calibration:
    """3x4 projection from homogeneous LiDAR points to homogeneous pixels."""

    p: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(p)):
            raise ValueError("projection matrix has non-finite entries")
        if np.allclose(p[2], 0.0):
            raise ValueError("projection matrix row 3 is zero")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "p", p)


def iou_2d(a: Box2D, b: Box2D) -> float:
    """Intersection over union of two axis-aligned image boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def diagonal(b: Box2D) -> float:
    """Diagonal length of a 2D box in pixels."""
    return math.hypot(b.width, b.height)


def project_box3d(b: Box3D, calib: Calibration) -> Box2D:
    """Axis-aligned hull of the 8 projected corners, clipped to the image.

    Raises BehindCamera if any corner has depth <= 0 and OutsideImage if
    the hull misses the image entirely.
    """
    corners = b.corners()
    homog = np.hstack([corners, np.ones((8, 1))])
    proj = homog @ calib.p.T
    depths = proj[:, 2]
    if np.any(depths <= 0.0):
        raise BehindCamera(f"box corner depth {depths.min():.3f} <= 0")
    u = proj[:, 0] / depths
    v = proj[:, 1] / depths
    x1 = max(float(u.min()), 0.0)
    y1 = max(float(v.min()), 0.0)
    x2 = min(float(u.max()), float(calib.image_width))
    y2 = min(float(v.max()), float(calib.image_height))
    if x1 >= x2 or y1 >= y2:
        raise OutsideImage("projected hull does not intersect the image")
    return Box2D(x1, y1, x2, y2)


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a CCW convex polygon."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = (b[0] - a[0], b[1] - a[1])
        if not output:
            break
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for cur in inputs:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                # Edge crossing: intersect segment prev->cur with the clip line.
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = edge[0] * dy - edge[1] * dx
                t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append((cur[0], cur[1]))
            prev, prev_in = cur, cur_in
    return np.asarray(output, dtype=np.float64).reshape(-1, 2)


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def footprint_intersection_area(a: Box3D, b: Box3D) -> float:
    """Ground-plane intersection area of two rotated box footprints."""
    return _polygon_area(_clip_polygon(a.footprint(), b.footprint()))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated 3D IoU: footprint polygon intersection times vertical overlap."""
    z_lo = max(a.cz - a.height / 2.0, b.cz - b.height / 2.0)
    z_hi = min(a.cz + a.height / 2.0, b.cz + b.height / 2.0)
    if z_hi <= z_lo:
        return 0.0
    # Footprints sit inside circles of radius hypot(l, w)/2; disjoint
    # circles mean zero overlap without running the polygon clip.
    reach = (math.hypot(a.length, a.width) + math.hypot(b.length, b.width)) / 2.0
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > reach:
        return 0.0
    inter_area = footprint_intersection_area(a, b)
    inter = inter_area * (z_hi - z_lo)
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


def nms(boxes: list[tuple[Box3D, float]], iou_threshold: float) -> list[tuple[Box3D, float]]:
    """Greedy non-maximum suppression with iou_3d.

    Survivors are returned in descending score order; ties are broken by
    input index (lower index wins) so the result is deterministic.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i][1], i))
    kept: list[int] = []
    for i in order:
        box = boxes[i][0]
        if all(iou_3d(box, boxes[j][0]) < iou_threshold for j in kept):
            kept.append(i)
    return [boxes[i] for i in kept]
