"""Latent-conditioned radiance field.

The shape stack consumes the projected position encoding plus ``z_shape``
and emits density and a feature vector; the texture stack consumes that
feature plus the projected direction encoding plus ``z_texture`` and emits
color.  Density never sees ``z_texture``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from dataclasses import field as dc_field

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import Tensor, nn

from carfield.encoding import DEFAULT_DIR_LEVELS, DEFAULT_POS_LEVELS, ipe_width
from carfield.errors import ShapeError, StateError


class FieldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = 128
    shape_depth: int = 8
    skip_layer: int | None = 4
    texture_depth: int = 2
    texture_width: int | None = None  # defaults to width
    pos_levels: int = DEFAULT_POS_LEVELS
    dir_levels: int = DEFAULT_DIR_LEVELS
    seed: int = 0


@dataclass
class LatentCode:
    z_shape: Tensor
    z_texture: Tensor

    def __post_init__(self):
        if self.z_shape.shape[-1] != self.z_texture.shape[-1]:
            raise ShapeError("z_shape and z_texture must share a width")

    @property
    def width(self) -> int:
        return self.z_shape.shape[-1]

    def detach(self) -> LatentCode:
        return LatentCode(self.z_shape.detach(), self.z_texture.detach())

    def clone(self) -> LatentCode:
        return LatentCode(self.z_shape.detach().clone(), self.z_texture.detach().clone())


@dataclass
class FieldSample:
    sigma: Tensor
    rgb: Tensor
    f_out: Tensor


def _he_uniform_(linear: nn.Linear, gen: torch.Generator, gain: float = 2.0) -> None:
    fan_in = linear.weight.shape[1]
    bound = math.sqrt(3.0 * gain / fan_in)
    with torch.no_grad():
        linear.weight.copy_((torch.rand(linear.weight.shape, generator=gen) * 2 - 1) * bound)
        linear.bias.zero_()


class CarField(nn.Module):
    def __init__(self, config: FieldConfig | None = None):
        super().__init__()
        self.config = cfg = config or FieldConfig()
        d = cfg.width
        tw = cfg.texture_width or d
        self.pos_proj = nn.Linear(ipe_width(cfg.pos_levels), d)
        self.shape_layers = nn.ModuleList(
            nn.Linear(2 * d if i == cfg.skip_layer else d, d) for i in range(cfg.shape_depth)
        )
        self.density_head = nn.Linear(d, 1)
        self.feature_head = nn.Linear(d, d)
        self.dir_proj = nn.Linear(ipe_width(cfg.dir_levels), d)
        widths = [d] + [tw] * cfg.texture_depth
        self.texture_layers = nn.ModuleList(nn.Linear(widths[i], widths[i + 1]) for i in range(cfg.texture_depth))
        self.color_head = nn.Linear(widths[-1], 3)
        self._grad_lock = threading.Lock()
        self.reset_parameters()

    @property
    def width(self) -> int:
        return self.config.width

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_grad_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._grad_lock = threading.Lock()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.config.seed)
        for lin in [self.pos_proj, *self.shape_layers, self.dir_proj, *self.texture_layers]:
            _he_uniform_(lin, gen)
        for lin in (self.density_head, self.feature_head, self.color_head):
            _he_uniform_(lin, gen, gain=1.0)

    def _check(self, x: Tensor, width: int, what: str) -> None:
        if x.shape[-1] != width:
            raise ShapeError(f"{what} has width {x.shape[-1]}, expected {width}")

    def eval_shape(self, ipe: Tensor, z_shape: Tensor) -> tuple[Tensor, Tensor]:
        """Feature vector and non-negative density for encoded segments."""
        self._check(ipe, self.pos_proj.in_features, "position encoding")
        self._check(z_shape, self.width, "z_shape")
        x = self.pos_proj(ipe) + z_shape
        h = x
        for i, layer in enumerate(self.shape_layers):
            if i == self.config.skip_layer:
                h = torch.cat(torch.broadcast_tensors(h, x), dim=-1)
            h = F.relu(layer(h))
        sigma = F.softplus(self.density_head(h))[..., 0]
        return self.feature_head(h), sigma

    def eval_texture(self, f_out: Tensor, dir_feat: Tensor, z_texture: Tensor) -> Tensor:
        self._check(f_out, self.width, "shape feature")
        self._check(dir_feat, self.dir_proj.in_features, "direction encoding")
        self._check(z_texture, self.width, "z_texture")
        h = f_out + self.dir_proj(dir_feat) + z_texture
        for layer in self.texture_layers:
            h = F.relu(layer(h))
        return torch.sigmoid(self.color_head(h))

    def forward(self, ipe: Tensor, dir_feat: Tensor, latents: LatentCode) -> FieldSample:
        f_out, sigma = self.eval_shape(ipe, latents.z_shape)
        rgb = self.eval_texture(f_out, dir_feat, latents.z_texture)
        return FieldSample(sigma=sigma, rgb=rgb, f_out=f_out)


@dataclass
class ForwardRecord:
    """Intermediates of one field evaluation, consumed by :func:`backward`."""

    field: CarField
    inputs: dict[str, Tensor]
    sample: FieldSample
    consumed: bool = dc_field(default=False)


def record_forward(field: CarField, ipe: Tensor, dir_feat: Tensor, z_shape: Tensor, z_texture: Tensor) -> ForwardRecord:
    inputs = {
        "ipe": ipe.detach().clone().requires_grad_(True),
        "dir_feat": dir_feat.detach().clone().requires_grad_(True),
        "z_shape": z_shape.detach().clone().requires_grad_(True),
        "z_texture": z_texture.detach().clone().requires_grad_(True),
    }
    latents = LatentCode(inputs["z_shape"], inputs["z_texture"])
    sample = field(inputs["ipe"], inputs["dir_feat"], latents)
    return ForwardRecord(field, inputs, sample)


def backward(
    record: ForwardRecord | None,
    grad_sigma: Tensor | None = None,
    grad_rgb: Tensor | None = None,
    grad_f_out: Tensor | None = None,
) -> dict[str, Tensor]:
    """Reverse pass for a recorded forward.

    Parameter gradients are accumulated into ``.grad`` of the field's
    parameters; gradients with respect to the four inputs are returned.
    """
    if record is None or record.consumed:
        raise StateError("backward needs a fresh forward record")
    outs, grads = [], []
    for out, g in (
        (record.sample.sigma, grad_sigma),
        (record.sample.rgb, grad_rgb),
        (record.sample.f_out, grad_f_out),
    ):
        if g is not None:
            outs.append(out)
            grads.append(g)
    record.consumed = True
    names = list(record.inputs)
    if not outs:
        return {k: torch.zeros_like(v) for k, v in record.inputs.items()}
    params = [p for p in record.field.parameters() if p.requires_grad]
    leaves = [record.inputs[k] for k in names] + params
    all_grads = torch.autograd.grad(outs, leaves, grads, allow_unused=True)
    with record.field._grad_lock:
        for p, g in zip(params, all_grads[len(names) :]):
            if g is None:
                g = torch.zeros_like(p)
            if p.grad is None:
                p.grad = g.detach().clone()
            else:
                p.grad.add_(g)
    return {
        k: (g if g is not None else torch.zeros_like(record.inputs[k])) for k, g in zip(names, all_grads[: len(names)])
    }
