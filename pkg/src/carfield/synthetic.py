"""Procedural car-like scenes with analytic density and color.

Used as ground truth at desk scale: a rounded box body with a half-ellipsoid
cabin on top, defined directly in canonical coordinates (y points down, so
the roof has negative y).
"""

from __future__ import annotations

import math

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator

from carfield.geometry import Box3D, CarDimensions, Intrinsics, project_points
from carfield.renderer import canonical_bounds, image_uv, pixel_cones

HEADLIGHT = (0.95, 0.92, 0.7)


class SyntheticScene(BaseModel):
    model_config = ConfigDict(extra="forbid")

    body_center: tuple[float, float, float] = (0.0, 0.35, 0.0)
    body_half: tuple[float, float, float] = (0.92, 0.45, 0.88)
    cabin_center: tuple[float, float, float] = (-0.1, -0.1, 0.0)
    cabin_radii: tuple[float, float, float] = (0.6, 0.78, 0.8)
    body_color: tuple[float, float, float] = (0.75, 0.15, 0.12)
    window_color: tuple[float, float, float] = (0.12, 0.14, 0.2)
    density_scale: float = 40.0
    edge_width: float = 0.04

    @model_validator(mode="after")
    def _contained(self):
        w = self.edge_width
        for j in range(3):
            if abs(self.body_center[j]) + self.body_half[j] + w > 1.0 + 1e-9:
                raise ValueError("body does not fit in the canonical cube")
            lo = self.cabin_center[j] - self.cabin_radii[j]
            hi = self.cabin_center[j] + (0.0 if j == 1 else self.cabin_radii[j])
            if lo - w < -1.0 - 1e-9 or hi + w > 1.0 + 1e-9:
                raise ValueError("cabin does not fit in the canonical cube")
        if self.density_scale <= 0 or self.edge_width <= 0:
            raise ValueError("density scale and edge width must be positive")
        return self


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _sdfs(scene: SyntheticScene, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.abs(p - np.asarray(scene.body_center)) - np.asarray(scene.body_half)
    body = q.max(axis=-1)
    radii = np.asarray(scene.cabin_radii)
    rel = p - np.asarray(scene.cabin_center)
    ell = (np.linalg.norm(rel / radii, axis=-1) - 1.0) * radii.min()
    cabin = np.maximum(ell, rel[..., 1])  # keep only the upper half
    return body, cabin


def synth_scene_sample(scene: SyntheticScene, points) -> tuple[np.ndarray, np.ndarray]:
    """Density and color at canonical points of shape (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    body, cabin = _sdfs(scene, p)
    sdf = np.minimum(body, cabin)
    w = scene.edge_width
    sigma = scene.density_scale * _smoothstep((w - sdf) / (2 * w))
    # blend towards the window color where the cabin dominates
    t = _smoothstep((body - cabin) / (2 * w) + 0.5)[..., None]
    base = np.asarray(scene.body_color)
    lower = _smoothstep((p[..., 1] - scene.body_center[1] - 0.5 * scene.body_half[1]) / (2 * w) + 0.5)
    base = base * (1.0 - 0.45 * lower[..., None])
    light = (
        _smoothstep((p[..., 0] - scene.body_center[0] - scene.body_half[0] + 0.08) / (2 * w) + 0.5)
        * _smoothstep((np.abs(p[..., 2]) - 0.45) / (2 * w) + 0.5)
        * _smoothstep(
            (0.25 * scene.body_half[1] - np.abs(p[..., 1] - scene.body_center[1] + 0.2 * scene.body_half[1])) / (2 * w)
            + 0.5
        )
    )[..., None]
    base = (1 - light) * base + light * np.asarray(HEADLIGHT)
    color = (1 - t) * base + t * np.asarray(scene.window_color)
    return sigma, color


def synth_render_gt(
    scene: SyntheticScene,
    cam_pose: np.ndarray,
    k: Intrinsics,
    resolution: tuple[int, int],
    n_samples: int = 512,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoint-rule render of the analytic scene.

    Returns ``(image, mask, acc)`` with image (H, W, 3) in [0, 1] on black,
    mask = acc > 0.5.
    """
    h, w = resolution
    uv = image_uv(h, w, torch.float64)
    cones = pixel_cones(uv, k, cam_pose, torch.float64)
    near, far, hit = canonical_bounds(cones.origin, cones.direction)
    o = cones.origin.numpy()
    d = cones.direction.numpy()
    near, far, hit = near.numpy(), far.numpy(), hit.numpy()

    rgb = np.zeros((h * w, 3))
    acc = np.zeros(h * w)
    idx = np.nonzero(hit)[0]
    if idx.size:
        s = (np.arange(n_samples) + 0.5) / n_samples
        t = near[idx, None] + (far - near)[idx, None] * s
        delta = ((far - near)[idx] / n_samples * np.linalg.norm(d[idx], axis=-1))[:, None]
        pts = o[idx, None, :] + t[..., None] * d[idx, None, :]
        sigma, color = synth_scene_sample(scene, pts)
        tau = sigma * delta
        trans = np.exp(-np.concatenate([np.zeros((idx.size, 1)), np.cumsum(tau, axis=-1)[:, :-1]], axis=-1))
        weights = trans * (1.0 - np.exp(-tau))
        rgb[idx] = np.sum(weights[..., None] * color, axis=1)
        acc[idx] = weights.sum(axis=-1)
    image = np.clip(rgb.reshape(h, w, 3), 0.0, 1.0)
    acc = acc.reshape(h, w)
    return image, acc > 0.5, acc


def fit_view(
    dims: CarDimensions,
    yaw: float,
    distance: float = 9.0,
    camera_height: float = 1.6,
    resolution: int = 64,
    fill: float = 0.85,
) -> tuple[Box3D, Intrinsics]:
    """Place a car in front of the camera and pick intrinsics that frame it.

    The camera sits ``camera_height`` above the car center looking along +z;
    focal and principal point are chosen so the projected box fills
    ``fill`` of the square image and is centered, mimicking a detector crop.
    """
    box = Box3D(center=(0.0, camera_height, distance), dims=dims, yaw=yaw)
    unit = Intrinsics(1.0, 1.0, 0.0, 0.0)
    uv = project_points(box.corners(), unit)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    focal = fill * resolution / float((hi - lo).max())
    mid = (lo + hi) / 2 * focal
    k = Intrinsics(focal, focal, resolution / 2 - mid[0], resolution / 2 - mid[1])
    return box, k


def random_scene(rng: np.random.Generator) -> SyntheticScene:
    """A scene with randomized body color and mildly varied proportions."""
    hue = rng.uniform(0, 1)
    sat = rng.uniform(0.4, 0.9)
    val = rng.uniform(0.45, 0.95)
    body_color = tuple(float(c) for c in _hsv_to_rgb(hue, sat, val))
    body_half_y = rng.uniform(0.38, 0.48)
    return SyntheticScene(
        body_center=(0.0, 0.95 - body_half_y - 0.04, 0.0),
        body_half=(0.92, body_half_y, 0.88),
        cabin_center=(rng.uniform(-0.2, 0.05), 0.95 - 2 * body_half_y - 0.04 + 0.05, 0.0),
        cabin_radii=(rng.uniform(0.5, 0.65), rng.uniform(0.7, 0.8) - (body_half_y - 0.38), 0.8),
        body_color=body_color,
    )


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6) % 6
    f = h * 6 - math.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
