"""Camera models, box algebra, rotated-box overlap and BEV NMS.

Conventions
-----------
World frame: x forward, y left, z up (meters).
Camera frame: x right, y down, z forward along the optical axis.
``CameraModel`` stores the world->camera transform, ``p_cam = R @ p + t``.
Depth always means camera-frame z, never range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
DEPTH_EPS = 1e-9
AREA_EPS = 1e-12


class NonPositiveDepth(ValueError):
    """Raised when a point sits on or behind the camera plane."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi) by repeated 2*pi shifts."""
    theta = float(theta)
    while theta >= math.pi:
        theta -= TWO_PI
    while theta < -math.pi:
        theta += TWO_PI
    return theta


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise ValueError("intrinsics must be upper-triangular")
        if not (K[0, 0] > 0 and K[1, 1] > 0 and K[2, 2] > 0):
            raise ValueError("intrinsics diagonal must be positive")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera origin in the world frame."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera-frame points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation

    @classmethod
    def looking_along(cls, yaw: float, position=(0.0, 0.0, 1.6), focal=316.0,
                      width=400, height=225) -> "CameraModel":
        """Level camera at ``position`` whose optical axis points at world ``yaw``."""
        c, s = math.cos(yaw), math.sin(yaw)
        R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        pos = np.asarray(position, dtype=np.float64)
        K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ pos, width, height)


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple
    heading: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("center and size must be 3-vectors")
        if not all(math.isfinite(v) for v in center):
            raise ValueError("center must be finite")
        if not all(v > 0 for v in size):
            raise ValueError(f"box sizes must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @classmethod
    def from_array(cls, values) -> "Box3D":
        v = [float(x) for x in values]
        return cls(tuple(v[0:3]), tuple(v[3:6]), v[6])

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.heading])

    def loc(self) -> np.ndarray:
        """Centroid and dimensions ``[x, y, z, l, w, h]``."""
        return np.array([*self.center, *self.size])

    @property
    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise footprint corners, shape (4, 2)."""
        return _rect_corners(self.center[0], self.center[1], self.size[0], self.size[1], self.heading)

    def corners(self) -> np.ndarray:
        """All eight corners, shape (8, 3)."""
        bev = self.bev_corners()
        z0 = self.center[2] - self.size[2] / 2.0
        z1 = self.center[2] + self.size[2] / 2.0
        return np.vstack([np.column_stack([bev, np.full(4, z0)]),
                          np.column_stack([bev, np.full(4, z1)])])

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of world points inside the box."""
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        c, s = math.cos(self.heading), math.sin(self.heading)
        lx = c * p[..., 0] + s * p[..., 1]
        ly = -s * p[..., 0] + c * p[..., 1]
        l, w, h = self.size
        return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(p[..., 2]) <= h / 2)


@dataclass(frozen=True)
class Box2D:
    center: tuple
    size: tuple

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if not all(math.isfinite(v) for v in center):
            raise ValueError("2D box center must be finite")
        if not all(v > 0 for v in size):
            raise ValueError("2D box sizes must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)

    @property
    def corners(self) -> tuple:
        """(u0, v0, u1, v1)."""
        u, v = self.center
        w, h = self.size
        return (u - w / 2, v - h / 2, u + w / 2, v + h / 2)

    @property
    def area(self) -> float:
        return self.size[0] * self.size[1]

    def shifted(self, du: float, dv: float) -> "Box2D":
        return Box2D((self.center[0] + du, self.center[1] + dv), self.size)


@dataclass(frozen=True)
class FrustumAngles:
    phi_u: float
    phi_v: float
    depth: float


# ---------------------------------------------------------------- projection

def project(cam: CameraModel, p) -> tuple:
    """Pinhole projection of a world point; returns ``(u, v, depth)``."""
    pc = cam.to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    if pc[2] <= DEPTH_EPS:
        raise NonPositiveDepth(f"camera-frame depth {pc[2]:.3g} is not positive")
    uvw = cam.intrinsics @ pc
    return (uvw[0] / uvw[2], uvw[1] / uvw[2], pc[2])


def project_many(cam: CameraModel, points: np.ndarray):
    """Vectorized projection; returns (uv (N,2), depth (N,)). No depth check."""
    pc = cam.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    uvw = pc @ cam.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / uvw[:, 2:3]
    return uv, pc[:, 2]


def unproject(cam: CameraModel, u: float, v: float, d: float) -> np.ndarray:
    """Lift pixel ``(u, v)`` at camera-frame depth ``d`` into the world frame."""
    if not d > 0:
        raise NonPositiveDepth(f"depth {d} is not positive")
    return unproject_many(cam, np.array([[u, v, d]], dtype=np.float64))[0]


def unproject_many(cam: CameraModel, uvd: np.ndarray) -> np.ndarray:
    """Vectorized unprojection of rows ``(u, v, d)``; depths must be positive."""
    uvd = np.asarray(uvd, dtype=np.float64).reshape(-1, 3)
    if np.any(uvd[:, 2] <= 0):
        raise NonPositiveDepth("unprojection depth must be positive")
    d = uvd[:, 2:3]
    hom = np.column_stack([uvd[:, 0], uvd[:, 1], np.ones(len(uvd))]) * d
    pc = np.linalg.solve(cam.intrinsics, hom.T).T
    return cam.to_world(pc)


def frustum_angles(cam: CameraModel, b: Box3D) -> FrustumAngles:
    x, y, z = cam.to_camera(np.asarray(b.center))
    if z <= DEPTH_EPS:
        raise NonPositiveDepth("box center is behind the camera")
    return FrustumAngles(math.atan(x / z), math.atan(y / z), float(z))


def in_frustum(cam: CameraModel, det: Box3D, gt: Box3D, alpha_phi: float, alpha_z: float) -> bool:
    try:
        a = frustum_angles(cam, det)
        b = frustum_angles(cam, gt)
    except NonPositiveDepth:
        return False
    dphi = math.hypot(a.phi_u - b.phi_u, a.phi_v - b.phi_v)
    return dphi < alpha_phi and abs(a.depth - b.depth) < alpha_z


# ------------------------------------------------------------ polygon overlap

def _rect_corners(cx, cy, l, w, heading) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    # rows rotated counter-clockwise by heading
    rot = np.array([[c, -s], [s, c]])
    out = local @ rot.T
    out[:, 0] += cx
    out[:, 1] += cy
    return out[[2, 3, 0, 1]]  # start at rear-right, CCW


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clip) -> list:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    poly = clip_polygon(a.bev_corners(), b.bev_corners())
    area = polygon_area(poly)
    return area if area > AREA_EPS else 0.0


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated IoU of the two footprints, z ignored."""
    inter = bev_intersection_area(a, b)
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return inter / union if union > 0 else 0.0


def _z_overlap(a: Box3D, b: Box3D) -> float:
    a0, a1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    b0, b1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    return max(0.0, min(a1, b1) - max(a0, b0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b) * _z_overlap(a, b)
    union = a.volume + b.volume - inter
    return inter / union


def giou_3d(a: Box3D, b: Box3D) -> float:
    """3D generalized IoU with the smallest axis-aligned enclosing box."""
    inter = bev_intersection_area(a, b) * _z_overlap(a, b)
    union = a.volume + b.volume - inter
    ca, cb = a.corners(), b.corners()
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    enclosing = float(np.prod(hi - lo))
    return inter / union - (enclosing - union) / enclosing


# ----------------------------------------------------------------------- NMS

def _bev_radius(box: Box3D) -> float:
    return 0.5 * math.hypot(box.size[0], box.size[1])


def nms_bev(boxes: Sequence[tuple], iou_threshold: float) -> list:
    """Greedy BEV NMS over ``(Box3D, score)`` pairs; returns kept indices by score."""
    n = len(boxes)
    if n == 0:
        return []
    scores = np.array([float(s) for _, s in boxes])
    # stable sort so equal scores keep input order
    order = np.argsort(-scores, kind="stable")
    xy = np.array([[b.center[0], b.center[1]] for b, _ in boxes])
    radius = np.array([_bev_radius(b) for b, _ in boxes])
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for rank, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[rank + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest) == 0:
            continue
        near = np.hypot(xy[rest, 0] - xy[i, 0], xy[rest, 1] - xy[i, 1]) < radius[rest] + radius[i]
        for j in rest[near]:
            if iou_bev(boxes[i][0], boxes[j][0]) > iou_threshold:
                suppressed[j] = True
    return keep


def iou_2d(a: Box2D, b: Box2D) -> float:
    a0u, a0v, a1u, a1v = a.corners
    b0u, b0v, b1u, b1v = b.corners
    iw = max(0.0, min(a1u, b1u) - max(a0u, b0u))
    ih = max(0.0, min(a1v, b1v) - max(a0v, b0v))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def nms_2d(boxes: Sequence[Box2D], scores: Sequence[float], iou_threshold: float) -> list:
    """Greedy image-space NMS; returns kept indices sorted by descending score."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep: list = []
    for i in order:
        if all(iou_2d(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(int(i))
    return keep
