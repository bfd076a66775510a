"""The trainable bundle: field, encoder and a table of per-instance latents."""

from __future__ import annotations

import hashlib
import json

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import Tensor, nn

from carfield.encoder import EncoderConfig, ImageEncoder
from carfield.field import CarField, FieldConfig, LatentCode
from carfield.renderer import RendererConfig


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    field: FieldConfig = Field(default_factory=FieldConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    renderer: RendererConfig = Field(default_factory=RendererConfig)

    @model_validator(mode="after")
    def _widths_agree(self):
        if self.encoder.latent_dim != self.field.width:
            raise ValueError(
                f"encoder latent_dim ({self.encoder.latent_dim}) must equal field width ({self.field.width})"
            )
        return self

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class CarModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config or ModelConfig()
        self.field = CarField(self.config.field).to(dtype)
        self.encoder = ImageEncoder(self.config.encoder).to(dtype)
        self.latents: dict[str, LatentCode] = {}

    @property
    def dtype(self) -> torch.dtype:
        return next(self.field.parameters()).dtype

    def encode(self, patch: Tensor, mask: Tensor) -> LatentCode:
        return self.encoder(patch.to(self.dtype), mask)

    def latent_for(self, instance: str, patch: Tensor | None = None, mask: Tensor | None = None) -> LatentCode:
        """Stored latents for ``instance``; otherwise an encoder forward pass."""
        if instance in self.latents:
            return self.latents[instance]
        if patch is None or mask is None:
            raise KeyError(f"no stored latents for {instance!r} and no patch to encode")
        with torch.no_grad():
            return self.encode(patch, mask)

    def tensors(self) -> dict[str, Tensor]:
        """Flat name -> tensor map of everything a checkpoint stores."""
        out = {f"field.{k}": v for k, v in self.field.state_dict().items()}
        out.update({f"encoder.{k}": v for k, v in self.encoder.state_dict().items()})
        for key in sorted(self.latents):
            lat = self.latents[key]
            out[f"latents.{key}.z_shape"] = lat.z_shape.detach()
            out[f"latents.{key}.z_texture"] = lat.z_texture.detach()
        return out

    def load_tensors(self, tensors: dict[str, Tensor]) -> None:
        field_sd = {k[len("field.") :]: v for k, v in tensors.items() if k.startswith("field.")}
        enc_sd = {k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")}
        self.field.load_state_dict(field_sd)
        self.encoder.load_state_dict(enc_sd)
        self.latents = {}
        pending: dict[str, dict[str, Tensor]] = {}
        for k, v in tensors.items():
            if k.startswith("latents."):
                inst, part = k[len("latents.") :].rsplit(".", 1)
                pending.setdefault(inst, {})[part] = v
        for inst, parts in pending.items():
            self.latents[inst] = LatentCode(parts["z_shape"].clone(), parts["z_texture"].clone())
