"""Oracle suites runnable from the command line (``--mode selftest``)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import oracles
from .attention import AttentionWeights, frustum_grid, mha, softmax
from .bev import RegionOfInterest, to_bev, voxelize
from .geometry import Box2D, Box3D, CameraModel, giou_3d, iou_bev, nms_bev, project_many, unproject_many
from .matching import focal_loss, hungarian
from .metrics import ap_from_flags


@dataclass
class SuiteResult:
    name: str
    checks: int
    failures: int
    worst: float

    def __post_init__(self):
        self.failures = int(self.failures)
        self.worst = float(self.worst)

    @property
    def passed(self) -> bool:
        return self.failures == 0


def random_camera(rng) -> CameraModel:
    """Arbitrary orientation, skewed non-square intrinsics, 640x480 image."""
    R = Rotation.random(random_state=rng).as_matrix()
    f = rng.uniform(200, 1200)
    K = np.array([[f, rng.uniform(-2, 2), rng.uniform(300, 340)],
                  [0.0, f * rng.uniform(0.9, 1.1), rng.uniform(220, 260)],
                  [0.0, 0.0, 1.0]])
    return CameraModel(K, R, rng.uniform(-5, 5, 3), 640, 480)


def random_box(rng, spread=3.0) -> Box3D:
    return Box3D(tuple(rng.uniform(-spread, spread, 3)), tuple(rng.uniform(0.5, 4.0, 3)),
                 rng.uniform(-math.pi, math.pi))


def geometry_round_trip(rng, n=2000) -> SuiteResult:
    fails, worst = 0, 0.0
    for _ in range(n // 100):
        cam = random_camera(rng)
        uvd = np.column_stack([rng.uniform(0, 640, 100), rng.uniform(0, 480, 100), rng.uniform(0.5, 80, 100)])
        pts = unproject_many(cam, uvd)
        uv, d = project_many(cam, pts)
        err = np.max(np.abs(np.column_stack([uv, d]) - uvd) / np.maximum(1.0, np.abs(uvd)))
        ref = np.array([oracles.pixel_unproject(cam, *row) for row in uvd[:5]])
        err = max(err, float(np.max(np.abs(ref - pts[:5]))))
        worst = max(worst, err)
        fails += err > 1e-9
    return SuiteResult("geometry_round_trip", n // 100, fails, worst)


def giou_monte_carlo(rng, n=20, samples=400_000) -> SuiteResult:
    fails, worst = 0, 0.0
    for _ in range(n):
        a, b = random_box(rng, 1.5), random_box(rng, 1.5)
        err = abs(giou_3d(a, b) - oracles.monte_carlo_giou(a, b, samples, rng))
        worst = max(worst, err)
        fails += err > 1e-2
    return SuiteResult("giou_monte_carlo", n, fails, worst)


def hungarian_exhaustive(rng, n=100) -> SuiteResult:
    fails, worst = 0, 0.0
    for k in range(n):
        shape = (5, 5) if k % 2 else (4, 6)
        C = rng.uniform(-2, 2, shape)
        C[rng.random(shape) < 0.2] = np.inf
        res = hungarian(C)
        n_ref, cost_ref = oracles.brute_force_assignment(C)
        cost = sum(C[i, j] for i, j in res.pairs)
        err = abs(cost - cost_ref)
        worst = max(worst, err)
        fails += (len(res.pairs) != n_ref) or err > 1e-9
    return SuiteResult("hungarian_exhaustive", n, fails, worst)


def focal_gradient(rng, n=200) -> SuiteResult:
    fails, worst = 0, 0.0
    for _ in range(n):
        x = rng.uniform(-6, 6, 1)
        t = rng.integers(0, 2, 1).astype(float)
        _, g = focal_loss(x, t)
        fd = oracles.central_difference(lambda z: focal_loss(z, t)[0], x)
        err = float(abs(g[0] - fd[0]) / max(abs(fd[0]), 1e-3))
        worst = max(worst, err)
        fails += err > 1e-5
    return SuiteResult("focal_gradient", n, fails, worst)


def attention_naive(rng, n=10) -> SuiteResult:
    fails, worst = 0, 0.0
    for _ in range(n):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 4))
        w = AttentionWeights.build(d, int(rng.integers(1, 6)), int(rng.integers(1, 6)), heads * 2, heads, rng)
        Q = rng.normal(size=(3, d))
        K = rng.normal(size=(4, w.key_dim))
        V = rng.normal(size=(4, w.value_dim))
        err = float(np.max(np.abs(mha(Q, K, V, w) - oracles.naive_mha(Q, K, V, w))))
        rows = softmax(rng.normal(size=(5, 7)) * 30).sum(axis=1)
        err = max(err, float(np.max(np.abs(rows - 1))))
        worst = max(worst, err)
        fails += err > 1e-10
    return SuiteResult("attention_naive", n, fails, worst)


def frustum_grid_reprojection(rng, n=20) -> SuiteResult:
    fails, worst = 0, 0.0
    for _ in range(n):
        cam = random_camera(rng)
        box = Box2D((rng.uniform(100, 540), rng.uniform(100, 380)), (rng.uniform(5, 80), rng.uniform(5, 80)))
        g = frustum_grid(box, rng.uniform(15, 60), cam)
        uv, _ = project_many(cam, g.points)
        lo = np.array(box.center) - np.array(box.size) / 2
        hi = np.array(box.center) + np.array(box.size) / 2
        err = float(max(np.max(lo - uv), np.max(uv - hi), 0.0))
        worst = max(worst, err)
        fails += err > 1e-6 or len(g.points) + g.dropped != 369
    return SuiteResult("frustum_grid_reprojection", n, fails, worst)


def nms_reference(rng, n=20) -> SuiteResult:
    fails = 0
    for _ in range(n):
        boxes = [Box3D((*rng.uniform(-6, 6, 2), 0.0), (*rng.uniform(1, 4, 2), 1.5), rng.uniform(-3, 3))
                 for _ in range(15)]
        scores = list(rng.random(15))
        got = nms_bev(list(zip(boxes, scores)), 0.2)
        ref = oracles.greedy_nms_reference(boxes, scores, iou_bev, 0.2)
        fails += got != ref
    return SuiteResult("nms_reference", n, fails, float(fails))


def voxel_dense(rng, n=10) -> SuiteResult:
    fails, worst = 0, 0.0
    roi = RegionOfInterest((-3.0, -3.0, -1.0), (3.0, 3.0, 1.0), (0.5, 0.5, 0.5))
    for _ in range(n):
        pts = rng.uniform(-3.5, 3.5, (300, 3))
        feats = rng.normal(size=(300, 3))
        grid = voxelize(pts, feats, roi)
        counts, means = oracles.dense_voxel_means(pts, feats, roi)
        bev = to_bev(grid).data
        err = float(np.max(np.abs(bev - oracles.dense_bev(counts, means))))
        if int(grid.counts.sum()) != int(counts.sum()):
            err = math.inf
        worst = max(worst, err)
        fails += err > 1e-12
    return SuiteResult("voxel_dense", n, fails, worst)


def ap_prefix(rng, n=30) -> SuiteResult:
    fails, worst = 0, 0.0
    for _ in range(n):
        gts = [tuple(rng.uniform(-10, 10, 2)) for _ in range(int(rng.integers(1, 6)))]
        dets = [(float(rng.random()), *rng.uniform(-10, 10, 2)) for _ in range(int(rng.integers(0, 8)))]
        dets += [(float(rng.random()), g[0] + rng.normal(0, 0.5), g[1] + rng.normal(0, 0.5)) for g in gts]
        order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
        used, flags = set(), []
        g = np.array(gts)
        for i in order:
            dist = np.hypot(g[:, 0] - dets[i][1], g[:, 1] - dets[i][2])
            dist[list(used)] = np.inf
            j = int(np.argmin(dist))
            flags.append(int(dist[j] < 1.0))
            if dist[j] < 1.0:
                used.add(j)
        err = abs(ap_from_flags(flags, len(gts)) - oracles.ap_by_prefix_enumeration(dets, gts, 1.0))
        worst = max(worst, err)
        fails += err > 1e-12
    return SuiteResult("ap_prefix", n, fails, worst)


SUITES = (geometry_round_trip, giou_monte_carlo, hungarian_exhaustive, focal_gradient, attention_naive,
          frustum_grid_reprojection, nms_reference, voxel_dense, ap_prefix)


def run_all(seed: int = 0) -> list:
    return [suite(np.random.default_rng([seed, k])) for k, suite in enumerate(SUITES)]
