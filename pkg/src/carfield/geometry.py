"""Frames, transforms and box geometry.

Conventions
-----------
Camera frame is OpenCV style: x right, y down, z forward.  The car frame has
x along the length, y along the height (pointing down, like the camera) and
z along the width; a car with yaw 0 has its length aligned with camera x.
The canonical frame is the car frame scaled so the box becomes [-1, 1]^3.

Camera poses handed to the renderer are camera-to-canonical matrices whose
camera side uses the OpenGL axis convention (x right, y up, z backward); the
fixed ``diag(1, -1, -1, 1)`` factor converts between the two conventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from carfield.errors import (
    BehindCameraError,
    InvalidDimensionsError,
    SingularTransformError,
)

# Fixed axis flip between canonical-side and camera-side scaled coordinates.
SCALED_CANON = np.diag([1.0, -1.0, -1.0, 1.0])

DIM_MIN = 0.5
DIM_MAX = 30.0


@dataclass(frozen=True)
class CarDimensions:
    length: float
    height: float
    width: float

    def __post_init__(self):
        for name in ("length", "height", "width"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidDimensionsError(f"{name} must be positive, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.length, self.height, self.width], dtype=np.float64)

    def plausible(self) -> bool:
        return all(DIM_MIN <= v <= DIM_MAX for v in (self.length, self.height, self.width))


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    dims: CarDimensions
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def pose(self) -> np.ndarray:
        """Car-to-camera rigid transform."""
        return rigid_transform(yaw_rotation(self.yaw), np.asarray(self.center))

    def corners(self) -> np.ndarray:
        """The 8 box corners in the camera frame, shape (8, 3)."""
        half = self.dims.as_array() / 2.0
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        local = signs * half
        return local @ yaw_rotation(self.yaw).T + np.asarray(self.center)


@dataclass(frozen=True)
class Box2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate 2D box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class Intrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.focal_x, 0.0, self.principal_x],
                [0.0, self.focal_y, self.principal_y],
                [0.0, 0.0, 1.0],
            ]
        )

    def shifted(self, dx: float, dy: float) -> Intrinsics:
        """Intrinsics of a crop whose top-left corner sits at (dx, dy)."""
        return Intrinsics(self.focal_x, self.focal_y, self.principal_x - dx, self.principal_y - dy)

    def scaled(self, factor: float) -> Intrinsics:
        return Intrinsics(
            self.focal_x * factor,
            self.focal_y * factor,
            self.principal_x * factor,
            self.principal_y * factor,
        )


def wrap_angle(a: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about the camera's vertical (y) axis, KITTI rotation_y sense."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rigid_transform(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


def is_rigid(m: np.ndarray, tol: float = 1e-6) -> bool:
    r = m[:3, :3]
    return (
        np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=tol)
        and np.allclose(r.T @ r, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) < tol
    )


def invert_transform(m: np.ndarray) -> np.ndarray:
    """Inverse of a 4x4 transform; closed form when ``m`` is rigid."""
    m = np.asarray(m, dtype=np.float64)
    if is_rigid(m):
        r_t = m[:3, :3].T
        return rigid_transform(r_t, -r_t @ m[:3, 3])
    det = np.linalg.det(m)
    if not np.isfinite(det) or abs(det) < 1e-12:
        raise SingularTransformError("transform is singular")
    return np.linalg.inv(m)


def scaled_cam_transform(dims: CarDimensions) -> np.ndarray:
    """Scale that maps a car of the given size onto [-1, 1]^3."""
    l, h, w = dims.length, dims.height, dims.width
    if min(l, h, w) <= 0:
        raise InvalidDimensionsError(f"non-positive dimensions {dims}")
    return np.diag([2.0 / l, 2.0 / h, 2.0 / w, 1.0])


def canonical_cam_pose(scaled_cam: np.ndarray, cam_car: np.ndarray) -> np.ndarray:
    """Camera-to-canonical pose from the car scale and the car-to-camera pose."""
    return np.asarray(scaled_cam) @ invert_transform(cam_car) @ SCALED_CANON


def invert_canonical_cam_pose(pose: np.ndarray, scaled_cam: np.ndarray) -> np.ndarray:
    """Recover the car-to-camera pose from a canonical camera pose."""
    # pose = S inv(C) F  =>  C = F pose^-1 S
    return SCALED_CANON @ invert_transform(pose) @ np.asarray(scaled_cam)


def box_canonical_pose(box: Box3D) -> np.ndarray:
    return canonical_cam_pose(scaled_cam_transform(box.dims), box.pose())


def camera_to_canonical(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Map camera-frame points, shape (..., 3), into the box's canonical frame."""
    m = scaled_cam_transform(box.dims) @ invert_transform(box.pose())
    return apply_transform(m, points)


def canonical_to_camera(points: np.ndarray, box: Box3D) -> np.ndarray:
    m = box.pose() @ np.diag(np.r_[1.0 / np.diag(scaled_cam_transform(box.dims))[:3], 1.0])
    return apply_transform(m, points)


def apply_transform(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p @ m[:3, :3].T + m[:3, 3]


def project_points(points: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the image plane")
    u = k.focal_x * p[..., 0] / z + k.principal_x
    v = k.focal_y * p[..., 1] / z + k.principal_y
    return np.stack([u, v], axis=-1)


def project_box3d(box: Box3D, k: Intrinsics) -> Box2D:
    """Axis-aligned pixel envelope of the 8 projected box corners."""
    uv = project_points(box.corners(), k)
    return Box2D(float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))


def iou_2d(a: Box2D, b: Box2D) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def rough_intrinsics(
    image_width: float,
    image_height: float,
    reference_focal: float = 721.5,
    reference_width: float = 1242.0,
) -> Intrinsics:
    """Guess intrinsics for an uncalibrated image.

    Principal point at the image center, focal length scaled from a
    reference camera in proportion to image width.
    """
    if min(image_width, image_height, reference_focal, reference_width) <= 0:
        raise ValueError("image and reference sizes must be positive")
    f = reference_focal * (image_width / reference_width)
    return Intrinsics(f, f, image_width / 2.0, image_height / 2.0)
