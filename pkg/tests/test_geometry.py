import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Polygon

from frustumfuse import oracles
from frustumfuse.geometry import (Box2D, Box3D, CameraModel, NonPositiveDepth, frustum_angles, giou_3d,
                                  in_frustum, iou_2d, iou_3d, iou_bev, nms_2d, nms_bev, project,
                                  project_many, unproject, wrap_angle)

from conftest import random_box, random_camera


def test_project_pinhole(simple_cam):
    assert project(simple_cam, (1.0, 2.0, 10.0)) == pytest.approx((10.0, 20.0, 10.0), abs=1e-12)
    assert project(simple_cam, (0.0, 0.0, 5.0)) == pytest.approx((0.0, 0.0, 5.0), abs=1e-12)


def test_unproject_inverse(simple_cam):
    np.testing.assert_allclose(unproject(simple_cam, 10.0, 20.0, 10.0), [1.0, 2.0, 10.0], atol=1e-12)


def test_unproject_principal_point_lies_on_axis(rng):
    cam = random_camera(rng)
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    axis = cam.rotation.T @ np.array([0.0, 0.0, 1.0])
    for d in (0.5, 3.0, 70.0):
        np.testing.assert_allclose(unproject(cam, cx, cy, d), cam.center + d * axis, atol=1e-9)


def test_depth_guards(simple_cam):
    with pytest.raises(NonPositiveDepth):
        project(simple_cam, (0.0, 0.0, 0.0))
    with pytest.raises(NonPositiveDepth):
        project(simple_cam, (0.0, 0.0, -3.0))
    with pytest.raises(NonPositiveDepth):
        unproject(simple_cam, 1.0, 1.0, 0.0)
    with pytest.raises(NonPositiveDepth):
        frustum_angles(simple_cam, Box3D((0, 0, -5), (1, 1, 1)))


def test_round_trip_random_points(rng):
    for _ in range(10):
        cam = random_camera(rng)
        cam_pts = np.column_stack([rng.uniform(-20, 20, (100, 2)), rng.uniform(0.1, 90, 100)])
        world = cam.to_world(cam_pts)
        uv, d = project_many(cam, world)
        for p, (u, v), z in zip(world, uv, d):
            np.testing.assert_allclose(unproject(cam, u, v, z), p, atol=1e-9)


def test_unproject_matches_closed_form(rng):
    for _ in range(20):
        cam = random_camera(rng)
        u, v, d = rng.uniform(0, 640), rng.uniform(0, 480), rng.uniform(0.5, 60)
        np.testing.assert_allclose(unproject(cam, u, v, d), oracles.pixel_unproject(cam, u, v, d), atol=1e-9)


def test_camera_invariants():
    with pytest.raises(ValueError):
        CameraModel(np.array([[1.0, 0, 0], [1.0, 1, 0], [0, 0, 1]]), np.eye(3), np.zeros(3), 10, 10)
    with pytest.raises(ValueError):
        CameraModel(np.diag([1.0, -1.0, 1.0]), np.eye(3), np.zeros(3), 10, 10)
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), np.diag([1.0, 1.0, 1.1]), np.zeros(3), 10, 10)
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), np.eye(3), np.zeros(3), 0, 10)


def test_box_invariants():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1))
    with pytest.raises(ValueError):
        Box2D((0, 0), (1, -1))
    assert Box3D((0, 0, 0), (1, 1, 1), math.pi).heading == pytest.approx(-math.pi)
    assert Box3D((0, 0, 0), (1, 1, 1), 7.0).heading == pytest.approx(7.0 - 2 * math.pi)


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_angle_range(theta):
    w = wrap_angle(theta)
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-9)


def test_frustum_angles(simple_cam):
    a = frustum_angles(simple_cam, Box3D((0, 0, 10), (1, 1, 1)))
    assert (a.phi_u, a.phi_v, a.depth) == pytest.approx((0.0, 0.0, 10.0))
    a = frustum_angles(simple_cam, Box3D((10, 0, 10), (1, 1, 1)))
    assert (a.phi_u, a.phi_v) == pytest.approx((math.pi / 4, 0.0))
    a = frustum_angles(simple_cam, Box3D((0, 10, 10), (1, 1, 1)))
    assert (a.phi_u, a.phi_v) == pytest.approx((0.0, math.pi / 4))


def test_in_frustum_cases(simple_cam):
    gt = Box3D((0, 0, 20), (1, 1, 1))
    assert in_frustum(simple_cam, gt, gt, 0.03, 5.0)
    rotated = Box3D((20 * math.tan(0.05), 0, 20), (1, 1, 1))
    assert not in_frustum(simple_cam, rotated, gt, 0.03, 5.0)
    deeper = Box3D((0, 0, 26), (1, 1, 1))
    assert not in_frustum(simple_cam, deeper, gt, 0.03, 5.0)
    behind = Box3D((0, 0, -20), (1, 1, 1))
    assert not in_frustum(simple_cam, behind, gt, 0.03, 5.0)


def test_in_frustum_monotone(rng, simple_cam):
    for _ in range(200):
        a = Box3D((*rng.uniform(-2, 2, 2), rng.uniform(5, 30)), (1, 1, 1))
        b = Box3D((*rng.uniform(-2, 2, 2), rng.uniform(5, 30)), (1, 1, 1))
        ap, az = rng.uniform(0, 0.3), rng.uniform(0, 10)
        if not in_frustum(simple_cam, a, b, ap, az):
            assert not in_frustum(simple_cam, a, b, ap * rng.random(), az * rng.random())


def test_giou_analytic_cases():
    a = Box3D((0, 0, 0), (1, 1, 1))
    assert abs(giou_3d(a, a) - 1.0) <= 1e-12
    assert abs(giou_3d(a, Box3D((3, 0, 0), (1, 1, 1))) + 0.5) <= 1e-12


def test_giou_properties(rng):
    for _ in range(300):
        a, b = random_box(rng), random_box(rng)
        g = giou_3d(a, b)
        assert g == pytest.approx(giou_3d(b, a), abs=1e-12)
        assert g <= iou_3d(a, b) + 1e-12
        assert -1.0 < g <= 1.0


def test_giou_self_is_one_for_axis_aligned(rng):
    for _ in range(100):
        b = random_box(rng)
        b = Box3D(b.center, b.size, rng.integers(-2, 2) * math.pi / 2)
        assert giou_3d(b, b) == pytest.approx(1.0, abs=1e-12)


def test_giou_self_rotated_pays_for_axis_aligned_hull(rng):
    # the enclosing box is axis-aligned, so a rotated box never fills it
    for _ in range(100):
        b = random_box(rng)
        l, w, h = b.size
        c, s = abs(math.cos(b.heading)), abs(math.sin(b.heading))
        hull = (l * c + w * s) * (l * s + w * c) * h
        assert giou_3d(b, b) == pytest.approx(1.0 - (hull - b.volume) / hull, abs=1e-12)


def test_giou_negative_for_disjoint_with_slack():
    a = Box3D((0, 0, 0), (1, 1, 1), 0.3)
    b = Box3D((4, 2, 1), (2, 1, 1), -0.7)
    assert giou_3d(a, b) < 0


def test_giou_against_monte_carlo(rng):
    for _ in range(5):
        a, b = random_box(rng, 1.5), random_box(rng, 1.5)
        assert giou_3d(a, b) == pytest.approx(oracles.monte_carlo_giou(a, b, 400_000, rng), abs=1e-2)


def _shapely(box):
    return Polygon(box.bev_corners())


def test_iou_bev_against_shapely(rng):
    for _ in range(300):
        a, b = random_box(rng, 2.0), random_box(rng, 2.0)
        pa, pb = _shapely(a), _shapely(b)
        expected = pa.intersection(pb).area / pa.union(pb).area
        assert iou_bev(a, b) == pytest.approx(expected, abs=1e-9)


def test_iou_bev_rotation_equivariant(rng):
    for _ in range(100):
        a, b = random_box(rng), random_box(rng)
        yaw = rng.uniform(-math.pi, math.pi)
        pivot = rng.uniform(-5, 5, 2)
        c, s = math.cos(yaw), math.sin(yaw)

        def turn(box):
            d = np.array(box.center[:2]) - pivot
            xy = pivot + np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])
            return Box3D((*xy, box.center[2]), box.size, box.heading + yaw)

        assert abs(iou_bev(turn(a), turn(b)) - iou_bev(a, b)) < 1e-9


def test_nms_bev_basic():
    a = Box3D((0, 0, 0), (2, 2, 1))
    far = Box3D((10, 0, 0), (2, 2, 1))
    assert nms_bev([(a, 0.8), (a, 0.9)], 0.2) == [1]
    assert sorted(nms_bev([(a, 0.9), (far, 0.8)], 0.2)) == [0, 1]


def test_nms_bev_matches_reference_and_order(rng):
    for _ in range(20):
        boxes = [Box3D((*rng.uniform(-8, 8, 2), 0.0), (*rng.uniform(1, 4, 2), 1.5), rng.uniform(-3, 3))
                 for _ in range(50)]
        scores = list(rng.permutation(50) / 50.0)
        kept = nms_bev(list(zip(boxes, scores)), 0.2)
        assert kept == oracles.greedy_nms_reference(boxes, scores, iou_bev, 0.2)
        assert [scores[i] for i in kept] == sorted((scores[i] for i in kept), reverse=True)
        for i in kept:
            for j in kept:
                if i < j:
                    assert iou_bev(boxes[i], boxes[j]) <= 0.2
        perm = rng.permutation(50)
        kept_perm = nms_bev([(boxes[p], scores[p]) for p in perm], 0.2)
        assert sorted(perm[k] for k in kept_perm) == sorted(kept)


def test_nms_2d():
    a = Box2D((50, 50), (20, 20))
    b = Box2D((51, 50), (20, 20))
    c = Box2D((150, 50), (20, 20))
    assert iou_2d(a, a) == 1.0
    assert nms_2d([a, b, c], [0.5, 0.9, 0.1], 0.85) == [1, 2]
    assert nms_2d([a, b, c], [0.5, 0.9, 0.1], 0.95) == [1, 0, 2]


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 80), st.floats(0, 400), st.floats(0, 225), st.floats(-math.pi, math.pi))
def test_round_trip_property(d, u, v, yaw):
    cam = CameraModel.looking_along(yaw)
    p = unproject(cam, u, v, d)
    assert project(cam, p) == pytest.approx((u, v, d), abs=1e-9)
