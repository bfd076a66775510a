"""Global image encoder producing decoupled shape and texture latents."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import Tensor, nn

from carfield.errors import ShapeError
from carfield.field import LatentCode


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: tuple[int, ...] = (16, 32, 64, 128)
    latent_dim: int = 128
    resolution: int = 64
    seed: int = 1


def letterbox(image: Tensor, size: int) -> Tensor:
    """Resize a (C, H, W) tensor to fit ``size`` x ``size``, padding with zeros."""
    c, h, w = image.shape
    if h == size and w == size:
        return image
    scale = size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = F.interpolate(image[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
    out = image.new_zeros(c, size, size)
    top, left = (size - nh) // 2, (size - nw) // 2
    out[:, top : top + nh, left : left + nw] = resized
    return out


def masked_mean(x: Tensor, weight: Tensor) -> Tensor:
    """Per-channel mean of (N, C, H, W) ``x`` weighted by (N, 1, H', W') ``weight``, area-resampled to H x W."""
    if weight.shape[-2:] != x.shape[-2:]:
        weight = F.interpolate(weight, size=x.shape[-2:], mode="area")
    return (x * weight).sum(dim=(-2, -1)) / weight.sum(dim=(-2, -1)).clamp_min(1e-6)


class ImageEncoder(nn.Module):
    """Strided conv trunk + masked average pool + two independent affine heads.

    The background is zeroed with the mask before anything else, so pixels
    outside the mask cannot influence the latents.  Pooling averages over the
    foreground only, and the foreground mean color is appended to the pooled
    features so the heads see it directly.
    """

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = cfg = config or EncoderConfig()
        layers = []
        c_in = 3
        for c_out in cfg.channels:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c_out
        self.trunk = nn.Sequential(*layers)
        self.shape_head = nn.Linear(c_in + 3, cfg.latent_dim)
        self.texture_head = nn.Linear(c_in + 3, cfg.latent_dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    gain = 6.0 if isinstance(m, nn.Conv2d) else 3.0
                    bound = (gain / fan_in) ** 0.5
                    m.weight.copy_((torch.rand(m.weight.shape, generator=gen) * 2 - 1) * bound)
                    m.bias.zero_()

    def prepare(self, patch: Tensor, mask: Tensor) -> Tensor:
        """Mask and letterbox an (H, W, 3) patch plus its mask into a (4, R, R) tensor."""
        if patch.dim() != 3 or patch.shape[-1] != 3:
            raise ShapeError(f"patch must be H x W x 3, got {tuple(patch.shape)}")
        if mask.shape != patch.shape[:2]:
            raise ShapeError(f"mask {tuple(mask.shape)} does not match patch {tuple(patch.shape[:2])}")
        m = mask[..., None].to(patch.dtype)
        return letterbox(torch.cat([patch * m, m], dim=-1).permute(2, 0, 1), self.config.resolution)

    def forward(self, patch: Tensor, mask: Tensor) -> LatentCode:
        """Encode one (H, W, 3) patch, or a batch (N, H, W, 3) of equal-size patches."""
        if patch.dim() == 4:
            x = torch.stack([self.prepare(p, m) for p, m in zip(patch, mask)])
        else:
            x = self.prepare(patch, mask)[None]
        image, weight = x[:, :3], x[:, 3:]
        z = torch.cat([masked_mean(self.trunk(image), weight), masked_mean(image, weight)], dim=-1)
        zs, zt = self.shape_head(z), self.texture_head(z)
        if patch.dim() == 3:
            zs, zt = zs[0], zt[0]
        return LatentCode(zs, zt)


def encode(encoder: ImageEncoder, patch: Tensor, mask: Tensor) -> LatentCode:
    return encoder(patch, mask)
