"""Conical frustum Gaussians and sinusoidal encodings.

All functions are batched over leading dimensions and differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from carfield.errors import InvalidIntervalError

DEFAULT_POS_LEVELS = 10
DEFAULT_DIR_LEVELS = 4


@dataclass
class Cone:
    """Cone with apex ``origin``, axis ``direction`` and radius ``radius * t`` at o + t d."""

    origin: Tensor  # (..., 3)
    direction: Tensor  # (..., 3), not necessarily unit length
    radius: Tensor  # (...,)


@dataclass
class GaussianSegment:
    """Gaussian approximation of a conical frustum.

    The covariance is ``axial_var * a a^T + radial_var * (I - a a^T)`` with
    ``a`` the unit cone axis; both variances are in world units.
    """

    mean: Tensor  # (..., 3)
    axial_var: Tensor  # (...,)
    radial_var: Tensor  # (...,)
    axis: Tensor  # (..., 3), unit

    def cov_diag(self) -> Tensor:
        a2 = self.axis**2
        return self.axial_var[..., None] * a2 + self.radial_var[..., None] * (1.0 - a2)

    def covariance(self) -> Tensor:
        a = self.axis
        outer = a[..., :, None] * a[..., None, :]
        eye = torch.eye(3, dtype=a.dtype, device=a.device)
        return self.axial_var[..., None, None] * outer + self.radial_var[..., None, None] * (eye - outer)


def frustum_gaussian(cone: Cone, t0, t1, check: bool = True) -> GaussianSegment:
    """Mean and covariance of the frustum of ``cone`` between t0 and t1.

    ``t0``/``t1`` broadcast against the cone's batch shape; pass them with a
    trailing sample dimension and a cone with a matching singleton to get
    per-interval segments.
    """
    t0 = torch.as_tensor(t0, dtype=cone.direction.dtype)
    t1 = torch.as_tensor(t1, dtype=cone.direction.dtype)
    if check and (bool(torch.any(t0 <= 0)) or bool(torch.any(t1 <= t0))):
        raise InvalidIntervalError("frustum interval needs 0 < t0 < t1")
    mid = (t0 + t1) / 2
    half = (t1 - t0) / 2
    denom = 3 * mid**2 + half**2
    t_mean = mid + 2 * mid * half**2 / denom
    t_var = half**2 / 3 - (4.0 / 15.0) * (half**4 * (12 * mid**2 - half**2)) / denom**2
    r_var = cone.radius**2 * (mid**2 / 4 + (5.0 / 12.0) * half**2 - (4.0 / 15.0) * half**4 / denom)

    d = cone.direction
    d_sq = torch.sum(d**2, dim=-1)
    mean = cone.origin + t_mean[..., None] * d
    axis = d / torch.sqrt(d_sq)[..., None]
    axial_var, radial_var = torch.broadcast_tensors(t_var * d_sq, r_var)
    return GaussianSegment(mean=mean, axial_var=axial_var, radial_var=radial_var, axis=axis.expand_as(mean))


def _sinusoids(x: Tensor, var: Tensor | None, levels: int) -> Tensor:
    scales = 2.0 ** torch.arange(levels, dtype=x.dtype, device=x.device)
    xs = x[..., None, :] * scales[:, None]  # (..., L, 3)
    s, c = torch.sin(xs), torch.cos(xs)
    if var is not None:
        att = torch.exp(-0.5 * var[..., None, :] * (scales**2)[:, None])
        s, c = s * att, c * att
    return torch.stack([s, c], dim=-1).reshape(*x.shape[:-1], levels * 3 * 2)


def integrated_pos_enc(mean: Tensor, var_diag: Tensor, levels: int = DEFAULT_POS_LEVELS) -> Tensor:
    """Expected sin/cos features of x ~ N(mean, diag(var_diag)).

    Layout is frequency-major: for each level, for each axis, (sin, cos).
    """
    return _sinusoids(mean, var_diag, levels)


def pos_enc(x: Tensor, levels: int) -> Tensor:
    return _sinusoids(x, None, levels)


def ipe_encode(seg: GaussianSegment, levels: int = DEFAULT_POS_LEVELS) -> Tensor:
    return integrated_pos_enc(seg.mean, seg.cov_diag(), levels)


def dir_encode(d: Tensor, levels: int = DEFAULT_DIR_LEVELS) -> Tensor:
    """Positional encoding of the normalized view direction."""
    d = torch.as_tensor(d)
    n = torch.linalg.norm(d, dim=-1, keepdim=True)
    return pos_enc(d / n, levels)


def ipe_width(levels: int) -> int:
    return 2 * 3 * levels


def pixel_footprint_radius(focal: float, pixel_width: float = 1.0) -> float:
    """Radius of a cone matching a square pixel's footprint at unit depth."""
    return 2.0 / math.sqrt(12.0) * pixel_width / focal
