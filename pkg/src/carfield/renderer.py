"""Cone generation, sampling and volume rendering in the canonical cube."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from torch import Tensor

from carfield.encoding import Cone, dir_encode, frustum_gaussian, ipe_encode
from carfield.field import CarField, LatentCode
from carfield.geometry import Intrinsics

FOOTPRINT = 2.0 / math.sqrt(12.0)


class RendererConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_coarse: int = 64
    n_fine: int = 64
    near_eps: float = 1e-3
    resample_floor: float = 1e-3
    jitter: bool = True
    chunk: int = 4096


@dataclass
class RenderOutput:
    rgb_coarse: Tensor  # (B, 3)
    rgb_fine: Tensor
    acc_coarse: Tensor  # (B,)
    acc_fine: Tensor
    edges_coarse: Tensor | None = None  # (B, n_coarse + 1), hit rays only
    edges_fine: Tensor | None = None
    weights_fine: Tensor | None = None
    hit: Tensor | None = None  # (B,) bool


def pixel_cones(uv: Tensor, k: Intrinsics, cam_pose: np.ndarray | Tensor, dtype: torch.dtype = torch.float32) -> Cone:
    """Cones through continuous pixel coordinates ``uv`` (B, 2).

    ``cam_pose`` is a camera-to-canonical matrix with an OpenGL-convention
    camera side.  The radius is the footprint of one pixel, measured as the
    distance between neighbouring pixel directions after the pose is
    applied, so scaled poses shrink or widen the cone accordingly.
    """
    pose = torch.as_tensor(np.asarray(cam_pose), dtype=dtype)
    uv = torch.as_tensor(uv, dtype=dtype).reshape(-1, 2)

    def directions(u, v):
        cam = torch.stack(
            [(u - k.principal_x) / k.focal_x, -(v - k.principal_y) / k.focal_y, -torch.ones_like(u)],
            dim=-1,
        )
        return cam @ pose[:3, :3].T

    d = directions(uv[:, 0], uv[:, 1])
    dx = directions(uv[:, 0] + 1.0, uv[:, 1]) - d
    radius = FOOTPRINT * torch.linalg.norm(dx, dim=-1)
    origin = pose[:3, 3].expand_as(d)
    return Cone(origin=origin, direction=d, radius=radius)


def pixel_cone(u: float, v: float, k: Intrinsics, cam_pose) -> Cone:
    c = pixel_cones(torch.tensor([[u, v]], dtype=torch.float64), k, cam_pose, dtype=torch.float64)
    return Cone(c.origin[0], c.direction[0], c.radius[0])


def image_uv(height: int, width: int, dtype=torch.float32) -> Tensor:
    """Pixel-center coordinates of an image in row-major order, (H*W, 2)."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype) + 0.5, torch.arange(width, dtype=dtype) + 0.5, indexing="ij"
    )
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)


def canonical_bounds(origin: Tensor, direction: Tensor, eps: float = 1e-3) -> tuple[Tensor, Tensor, Tensor]:
    """Slab intersection of rays with [-1, 1]^3.

    Returns ``(near, far, hit)``; near is clamped to ``eps``.  Entries for
    missed rays are meaningless.
    """
    o, d = origin, direction
    parallel = d == 0
    safe_d = torch.where(parallel, torch.ones_like(d), d)
    ta = (-1.0 - o) / safe_d
    tb = (1.0 - o) / safe_d
    lo = torch.minimum(ta, tb)
    hi = torch.maximum(ta, tb)
    inside = o.abs() <= 1.0
    inf = torch.full_like(lo, math.inf)
    lo = torch.where(parallel, torch.where(inside, -inf, inf), lo)
    hi = torch.where(parallel, torch.where(inside, inf, -inf), hi)
    near = lo.max(dim=-1).values
    far = hi.min(dim=-1).values
    near = torch.clamp(near, min=eps)
    hit = far > near
    return near, far, hit


def stratified_samples(
    near: Tensor, far: Tensor, n: int, generator: torch.Generator | None = None, jitter: bool = True
) -> Tensor:
    """``n + 1`` increasing edges in [near, far] per ray, one jittered edge per stratum."""
    s = torch.linspace(0.0, 1.0, n + 1, dtype=near.dtype)
    t = near[..., None] + (far - near)[..., None] * s
    if not jitter:
        return t
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    upper = torch.cat([mids, t[..., -1:]], dim=-1)
    lower = torch.cat([t[..., :1], mids], dim=-1)
    u = torch.rand(t.shape, generator=generator, dtype=t.dtype)
    return lower + (upper - lower) * u


def resample_fine(
    weights: Tensor,
    edges: Tensor,
    n_fine: int,
    generator: torch.Generator | None = None,
    jitter: bool = True,
    floor: float = 1e-3,
) -> Tensor:
    """Inverse-transform sampling of ``n_fine + 1`` edges from a weight histogram.

    Each bin gets ``floor * mean(weights)`` extra mass so the support covers the
    whole interval; an all-zero histogram becomes uniform.  The result is
    detached: no gradient flows through sample positions.
    """
    weights = weights.detach()
    edges = edges.detach()
    n_bins = weights.shape[-1]
    total = weights.sum(dim=-1, keepdim=True)
    w = weights + floor * total / n_bins + 1e-12
    pdf = w / w.sum(dim=-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, dim=-1)], dim=-1)
    cdf[..., -1] = 1.0

    m = n_fine + 1
    offs = torch.rand((*weights.shape[:-1], m), generator=generator, dtype=edges.dtype) if jitter else 0.5
    u = (torch.arange(m, dtype=edges.dtype) + offs) / m
    u = u.expand(*weights.shape[:-1], m).contiguous()

    idx = torch.searchsorted(cdf, u, right=True)
    below = torch.clamp(idx - 1, 0, n_bins - 1)
    above = below + 1
    cdf_lo = torch.gather(cdf, -1, below)
    cdf_hi = torch.gather(cdf, -1, above)
    t_lo = torch.gather(edges, -1, below)
    t_hi = torch.gather(edges, -1, above)
    frac = torch.clamp((u - cdf_lo) / (cdf_hi - cdf_lo), 0.0, 1.0)
    t = t_lo + frac * (t_hi - t_lo)
    t, _ = torch.sort(t, dim=-1)
    return t


def composite(
    sigma: Tensor, rgb: Tensor, edges: Tensor, dist_scale: Tensor | float = 1.0
) -> tuple[Tensor, Tensor, Tensor]:
    """Alpha-composite per-interval density/color against a black background.

    ``dist_scale`` converts edge parameters to distances (the direction norm
    when directions are not unit length).  Returns ``(rgb, acc, weights)``.
    """
    delta = (edges[..., 1:] - edges[..., :-1]) * torch.as_tensor(dist_scale, dtype=edges.dtype)[..., None]
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    # exclusive cumulative optical depth
    depth = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(depth[..., :1]), depth[..., :-1]], dim=-1))
    weights = trans * alpha
    out_rgb = torch.sum(weights[..., None] * rgb, dim=-2)
    acc = weights.sum(dim=-1)
    return out_rgb, acc, weights


def _field_pass(field: CarField, cone: Cone, edges: Tensor, dir_feat: Tensor, latents: LatentCode, dist_scale):
    cone_b = Cone(cone.origin[:, None, :], cone.direction[:, None, :], cone.radius[:, None])
    seg = frustum_gaussian(cone_b, edges[:, :-1], edges[:, 1:], check=False)
    ipe = ipe_encode(seg, field.config.pos_levels)
    lat = LatentCode(_per_ray(latents.z_shape), _per_ray(latents.z_texture))
    sample = field(ipe, dir_feat, lat)
    return composite(sample.sigma, sample.rgb, edges, dist_scale)


def _per_ray(z: Tensor) -> Tensor:
    # (D,) -> (1, 1, D); (B, D) -> (B, 1, D)
    return z[None, None, :] if z.dim() == 1 else z[:, None, :]


def render_rays(
    field: CarField,
    latents: LatentCode,
    cones: Cone,
    config: RendererConfig | None = None,
    generator: torch.Generator | None = None,
    edges_coarse: Tensor | None = None,
    edges_fine: Tensor | None = None,
) -> RenderOutput:
    """Coarse and fine passes for a batch of cones.

    Latents may be shared, shape (D,), or per ray, shape (B, D).  Passing
    ``edges_coarse``/``edges_fine`` (for hit rays, as returned in a previous
    output) freezes the sample positions.
    """
    cfg = config or RendererConfig()
    dtype = cones.direction.dtype
    n = cones.direction.shape[0]
    near, far, hit = canonical_bounds(cones.origin, cones.direction, cfg.near_eps)
    idx = torch.nonzero(hit, as_tuple=True)[0]

    rgb_c = torch.zeros(n, 3, dtype=dtype)
    rgb_f = torch.zeros(n, 3, dtype=dtype)
    acc_c = torch.zeros(n, dtype=dtype)
    acc_f = torch.zeros(n, dtype=dtype)
    if idx.numel() == 0:
        empty = torch.zeros(0, 1, dtype=dtype)
        return RenderOutput(rgb_c, rgb_f, acc_c, acc_f, empty, empty, empty, hit)

    cone = Cone(cones.origin[idx], cones.direction[idx], cones.radius[idx])
    lat = latents
    if latents.z_shape.dim() == 2:
        lat = LatentCode(latents.z_shape[idx], latents.z_texture[idx])
    dist_scale = torch.linalg.norm(cone.direction, dim=-1)
    dir_feat = dir_encode(cone.direction, field.config.dir_levels)[:, None, :]

    if edges_coarse is None:
        edges_coarse = stratified_samples(near[idx], far[idx], cfg.n_coarse, generator, cfg.jitter)
    c_rgb, c_acc, c_w = _field_pass(field, cone, edges_coarse, dir_feat, lat, dist_scale)
    if edges_fine is None:
        edges_fine = resample_fine(c_w, edges_coarse, cfg.n_fine, generator, cfg.jitter, cfg.resample_floor)
    f_rgb, f_acc, f_w = _field_pass(field, cone, edges_fine, dir_feat, lat, dist_scale)

    rgb_c = rgb_c.index_copy(0, idx, c_rgb)
    rgb_f = rgb_f.index_copy(0, idx, f_rgb)
    acc_c = acc_c.index_copy(0, idx, c_acc)
    acc_f = acc_f.index_copy(0, idx, f_acc)
    return RenderOutput(rgb_c, rgb_f, acc_c, acc_f, edges_coarse, edges_fine, f_w, hit)


def render_pixel(field, latents, cone: Cone, config=None, generator=None) -> RenderOutput:
    """Render a single cone (unbatched tensors)."""
    batch = Cone(cone.origin.reshape(1, 3), cone.direction.reshape(1, 3), cone.radius.reshape(1))
    return render_rays(field, latents, batch, config, generator)


@torch.no_grad()
def render_image(
    field: CarField,
    latents: LatentCode,
    k: Intrinsics,
    cam_pose,
    height: int,
    width: int,
    config: RendererConfig | None = None,
    seed: int = 0,
) -> dict[str, Tensor]:
    """Render a full image; returns H x W x 3 rgb and H x W acc for both passes."""
    cfg = config or RendererConfig(jitter=False)
    dtype = next(field.parameters()).dtype
    uv = image_uv(height, width, dtype)
    cones = pixel_cones(uv, k, cam_pose, dtype)
    gen = torch.Generator().manual_seed(seed)
    parts = []
    for s in range(0, uv.shape[0], cfg.chunk):
        sl = slice(s, s + cfg.chunk)
        out = render_rays(field, latents, Cone(cones.origin[sl], cones.direction[sl], cones.radius[sl]), cfg, gen)
        parts.append(out)
    cat = lambda name: torch.cat([getattr(p, name) for p in parts], dim=0)
    return {
        "rgb_coarse": cat("rgb_coarse").reshape(height, width, 3),
        "rgb_fine": cat("rgb_fine").reshape(height, width, 3),
        "acc_coarse": cat("acc_coarse").reshape(height, width),
        "acc_fine": cat("acc_fine").reshape(height, width),
    }
