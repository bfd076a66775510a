import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carfield import geometry as geo
from carfield.errors import BehindCameraError, InvalidDimensionsError, SingularTransformError

from .conftest import random_rigid

dim = st.floats(0.5, 30.0)


def test_scaled_cam_unit_cases():
    assert np.array_equal(geo.scaled_cam_transform(geo.CarDimensions(2, 2, 2)), np.eye(4))
    assert np.array_equal(geo.scaled_cam_transform(geo.CarDimensions(4, 2, 1)), np.diag([0.5, 1, 2, 1]))
    s = geo.scaled_cam_transform(geo.CarDimensions(3.88, 1.53, 1.63))
    np.testing.assert_allclose(np.diag(s), [0.51546, 1.30719, 1.22699, 1], atol=1e-5)


def test_non_positive_dims_rejected():
    with pytest.raises(InvalidDimensionsError):
        geo.CarDimensions(0.0, 1.0, 1.0)
    with pytest.raises(InvalidDimensionsError):
        geo.CarDimensions(1.0, -2.0, 1.0)


@given(dim, dim, dim)
def test_scaled_cam_maps_corners_to_unit_cube(l, h, w):
    s = geo.scaled_cam_transform(geo.CarDimensions(l, h, w))
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                p = s @ np.array([sx * l / 2, sy * h / 2, sz * w / 2, 1.0])
                np.testing.assert_allclose(p[:3], [sx, sy, sz], rtol=1e-12)


def test_canonical_cam_pose_unit_cases():
    assert np.array_equal(geo.canonical_cam_pose(np.eye(4), np.eye(4)), np.diag([1, -1, -1, 1]))
    out = geo.canonical_cam_pose(np.diag([0.5, 1, 2, 1]), np.eye(4))
    assert np.array_equal(out, np.diag([0.5, -1, -2, 1]))


def test_canonical_cam_pose_round_trip(rng):
    s = geo.scaled_cam_transform(geo.CarDimensions(2, 2, 2))
    for _ in range(100):
        c = random_rigid(rng)
        pose = geo.canonical_cam_pose(s, c)
        np.testing.assert_allclose(geo.invert_canonical_cam_pose(pose, s), c, atol=1e-9)


def test_canonical_cam_pose_composes(rng):
    s = geo.scaled_cam_transform(geo.CarDimensions(4.1, 1.5, 1.7))
    for _ in range(50):
        a, b = random_rigid(rng), random_rigid(rng)
        joint = geo.canonical_cam_pose(s, a @ b)
        parts = s @ np.linalg.inv(b) @ np.linalg.inv(a) @ geo.SCALED_CANON
        np.testing.assert_allclose(joint, parts, atol=1e-9)


def test_singular_transform_rejected():
    m = np.eye(4)
    m[0, 0] = 0.0
    with pytest.raises(SingularTransformError):
        geo.canonical_cam_pose(np.eye(4), m)


def test_rigid_inverse_matches_general(rng):
    for _ in range(20):
        m = random_rigid(rng)
        np.testing.assert_allclose(geo.invert_transform(m), np.linalg.inv(m), atol=1e-10)


def test_world_canonical_world_round_trip(rng):
    """10^4 random poses and dims, each carrying a batch of points."""
    worst = 0.0
    for _ in range(10_000):
        dims = geo.CarDimensions(*rng.uniform(0.5, 30.0, size=3))
        box = geo.Box3D(rng.uniform(-50, 50, size=3), dims, rng.uniform(-math.pi, math.pi))
        world_cam = random_rigid(rng)
        pts_world = rng.uniform(-50, 50, size=(4, 3))
        cam = geo.apply_transform(world_cam, pts_world)
        canon = geo.camera_to_canonical(cam, box)
        back = geo.apply_transform(geo.invert_transform(world_cam), geo.canonical_to_camera(canon, box))
        worst = max(worst, float(np.abs(back - pts_world).max()))
    assert worst < 1e-6


def test_box_corners_land_on_cube_corners():
    box = geo.Box3D((1.0, 2.0, 15.0), geo.CarDimensions(4.0, 1.5, 1.8), 0.7)
    canon = geo.camera_to_canonical(box.corners(), box)
    np.testing.assert_allclose(np.abs(canon), 1.0, atol=1e-12)


def test_canonical_pose_places_camera_at_origin_of_view():
    # camera origin expressed in canonical coordinates equals the pose translation
    box = geo.Box3D((0.5, 1.0, 12.0), geo.CarDimensions(4.0, 1.5, 1.8), 0.3)
    pose = geo.box_canonical_pose(box)
    np.testing.assert_allclose(pose[:3, 3], geo.camera_to_canonical(np.zeros(3), box), atol=1e-12)


def test_project_unit_cube_example():
    box = geo.Box3D((0, 0, 10), geo.CarDimensions(1, 1, 1), 0.0)
    k = geo.Intrinsics(100, 100, 50, 50)
    b = geo.project_box3d(box, k)
    # near face corners (depth 9.5) bound the envelope on both sides
    assert b.x_max == pytest.approx(50 + 100 * 0.5 / 9.5, abs=1e-3)
    assert b.x_max == pytest.approx(55.263, abs=1e-3)
    assert b.x_min == pytest.approx(50 - 100 * 0.5 / 9.5, abs=1e-3)
    assert (b.y_min, b.y_max) == pytest.approx((b.x_min, b.x_max))
    rotated = geo.project_box3d(geo.Box3D((0, 0, 10), geo.CarDimensions(1, 1, 1), math.pi / 2), k)
    np.testing.assert_allclose(rotated.as_list(), b.as_list(), atol=1e-9)


def test_project_behind_camera():
    box = geo.Box3D((0, 0, 0.5), geo.CarDimensions(1, 1, 1), 0.0)
    with pytest.raises(BehindCameraError):
        geo.project_box3d(box, geo.Intrinsics(100, 100, 50, 50))


@settings(max_examples=200)
@given(st.floats(-5, 5), st.floats(-2, 2), st.floats(5, 60), dim, dim, dim, st.floats(-math.pi, math.pi))
def test_projection_contains_center(x, y, z, l, h, w, yaw):
    box = geo.Box3D((x, y, z), geo.CarDimensions(min(l, 8), min(h, 4), min(w, 4)), yaw)
    k = geo.Intrinsics(700, 700, 600, 180)
    try:
        b = geo.project_box3d(box, k)
    except BehindCameraError:
        return
    c = geo.project_points(np.array([x, y, z]), k)
    assert b.x_min <= c[0] <= b.x_max and b.y_min <= c[1] <= b.y_max


def test_iou_examples():
    a = geo.Box2D(0, 0, 10, 10)
    assert geo.iou_2d(a, a) == 1.0
    assert geo.iou_2d(a, geo.Box2D(20, 20, 30, 30)) == 0.0
    assert geo.iou_2d(a, geo.Box2D(5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-6)


box2d = st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(0.1, 50), st.floats(0.1, 50)).map(
    lambda t: geo.Box2D(t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@given(box2d, box2d)
def test_iou_properties(a, b):
    v = geo.iou_2d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(geo.iou_2d(b, a))
    if v == 1.0:
        assert a.as_list() == pytest.approx(b.as_list())


def test_rough_intrinsics_examples():
    k = geo.rough_intrinsics(1242, 375, 721.5, 1242)
    assert (k.focal_x, k.focal_y, k.principal_x, k.principal_y) == (721.5, 721.5, 621, 187.5)
    k = geo.rough_intrinsics(2484, 750, 721.5, 1242)
    assert (k.focal_x, k.principal_x, k.principal_y) == (1443, 1242, 375)
    k = geo.rough_intrinsics(100, 100, 100, 100)
    assert (k.focal_x, k.principal_x, k.principal_y) == (100, 50, 50)


@given(st.floats(-100, 100))
def test_yaw_wrapped(yaw):
    b = geo.Box3D((0, 0, 10), geo.CarDimensions(4, 1.5, 1.8), yaw)
    assert -math.pi <= b.yaw < math.pi
