"""Slow, independent reference implementations used by the self-test and the test suite.

Nothing here shares code paths with the implementations it checks beyond
the basic data types.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from .geometry import Box3D, CameraModel


def monte_carlo_giou(a: Box3D, b: Box3D, n: int = 1_000_000, rng=None, unit_samples=None) -> float:
    """GIoU estimated by uniform sampling of the axis-aligned enclosing box.

    ``unit_samples`` (n, 3) in the unit cube replaces the pseudo-random draw,
    e.g. a scrambled Sobol set.
    """
    corners = np.vstack([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    if unit_samples is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        unit_samples = rng.random((n, 3))
    n = len(unit_samples)
    pts = lo + unit_samples * (hi - lo)
    in_a = a.contains(pts)
    in_b = b.contains(pts)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union - (n - union) / n


def brute_force_assignment(C) -> tuple:
    """Exhaustive minimum over injective row->column maps of size min(N, M).

    Returns ``(finite pair count, finite cost total)`` of the best map, ranking
    maps by most finite pairs first and then lowest cost.
    """
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    best = None
    if n <= m:
        maps = ((tuple(range(n)), cols) for cols in itertools.permutations(range(m), n))
    else:
        maps = ((rows, tuple(range(m))) for rows in itertools.permutations(range(n), m))
    for rows, cols in maps:
        vals = [C[i, j] for i, j in zip(rows, cols)]
        fin = [v for v in vals if math.isfinite(v)]
        key = (-len(fin), sum(fin))
        if best is None or key < best:
            best = key
    if best is None:
        return 0, 0.0
    return -best[0], best[1]


def naive_mha(Q, K, V, w) -> np.ndarray:
    """Element-by-element multi-head attention."""
    Q, K, V = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (Q, K, V))
    n, d = Q.shape[0], w.P_v.shape[1]
    m = w.heads
    lh = w.P_q.shape[1] // m
    dh = d // m

    def proj(X, P):
        out = np.zeros((X.shape[0], P.shape[1]))
        for r in range(X.shape[0]):
            for c in range(P.shape[1]):
                out[r, c] = sum(X[r, k] * P[k, c] for k in range(X.shape[1]))
        return out

    q, k, v = proj(Q, w.P_q), proj(K, w.P_k), proj(V, w.P_v)
    concat = np.zeros((n, d))
    for h in range(m):
        for i in range(n):
            scores = []
            for j in range(K.shape[0]):
                s = sum(q[i, h * lh + t] * k[j, h * lh + t] for t in range(lh))
                scores.append(s / math.sqrt(lh))
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            z = sum(ex)
            for c in range(dh):
                concat[i, h * dh + c] = sum(ex[j] / z * v[j, h * dh + c] for j in range(K.shape[0]))
    return proj(concat, w.P_o)


def greedy_nms_reference(boxes, scores, iou_fn, threshold) -> list:
    """Textbook greedy NMS: repeatedly take the best remaining box, drop its overlaps."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = max(remaining, key=lambda i: (scores[i], -i))
        keep.append(best)
        remaining = [i for i in remaining if i != best and iou_fn(boxes[best], boxes[i]) <= threshold]
    return keep


def dense_voxel_means(points, features, roi):
    """Dense-array binning: returns (counts grid, mean-feature grid)."""
    shape = roi.grid_shape
    features = np.asarray(features, dtype=np.float64).reshape(len(points), -1)
    counts = np.zeros(shape, dtype=np.int64)
    sums = np.zeros(shape + (features.shape[1],))
    for p, f in zip(points, features):
        if not all(lo <= x < hi for x, lo, hi in zip(p, roi.mins, roi.maxs)):
            continue
        idx = tuple(min(int((x - lo) // s), n - 1) for x, lo, s, n in zip(p, roi.mins, roi.voxel_size, shape))
        counts[idx] += 1
        sums[idx] += f
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts[..., None] > 0, sums / np.maximum(counts, 1)[..., None], 0.0)
    return counts, means


def dense_bev(counts, means) -> np.ndarray:
    occupied = counts > 0
    levels = occupied.sum(axis=2)
    total = (means * occupied[..., None]).sum(axis=2)
    return np.where(levels[..., None] > 0, total / np.maximum(levels, 1)[..., None], 0.0)


def central_difference(f, x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        grad.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def binary_cross_entropy(logits, target) -> float:
    """``-log p`` for positives and ``-log(1 - p)`` for negatives, written as ``log1p(exp(-+x))``."""
    total = 0.0
    for x, t in zip(np.ravel(logits), np.ravel(target)):
        z = -x if t else x
        total += z + math.log1p(math.exp(-z)) if z > 0 else math.log1p(math.exp(z))
    return total


def ray_face_depth(origin, direction, box: Box3D) -> float:
    """Entry depth via explicit intersection with each of the six face planes."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    axes = [np.array([c, s, 0.0]), np.array([-s, c, 0.0]), np.array([0.0, 0.0, 1.0])]
    half = np.asarray(box.size) / 2
    center = np.asarray(box.center)
    best = math.inf
    for a in range(3):
        for sign in (-1.0, 1.0):
            normal = axes[a] * sign
            point = center + normal * half[a]
            denom = float(normal @ direction)
            if abs(denom) < 1e-15:
                continue
            t = float(normal @ (point - origin)) / denom
            if t <= 0:
                continue
            hit = origin + t * direction - center
            if all(abs(float(hit @ axes[b])) <= half[b] + 1e-9 for b in range(3) if b != a):
                best = min(best, t)
    return best


def pixel_unproject(cam: CameraModel, u: float, v: float, d: float) -> np.ndarray:
    """Closed-form pinhole inverse for upper-triangular K."""
    K = cam.intrinsics
    fx, skew, cx = K[0]
    fy, cy = K[1, 1], K[1, 2]
    y = (v - cy) / fy * d
    x = ((u - cx) * d - skew * y) / fx
    return cam.rotation.T @ (np.array([x, y, d]) - cam.translation)


def ap_by_prefix_enumeration(dets, gts, tau) -> float:
    """AP from scratch at every ranking prefix.

    ``dets`` are ``(score, x, y)``, ``gts`` are ``(x, y)``; single frame, single class.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    points = [(0.0, 1.0)]
    for k in range(1, len(order) + 1):
        used = set()
        tp = 0
        for i in order[:k]:
            _, x, y = dets[i]
            cand = [(math.hypot(x - gx, y - gy), j) for j, (gx, gy) in enumerate(gts) if j not in used]
            cand = [c for c in cand if c[0] < tau]
            if cand:
                used.add(min(cand)[1])
                tp += 1
        points.append((tp / len(gts), tp / k))
    area = 0.0
    for (r0, p0), (r1, p1) in zip(points[:-1], points[1:]):
        area += (r1 - r0) * (p0 + p1) / 2
    return area
