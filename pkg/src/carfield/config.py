"""Run configuration files and presets."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from carfield.dataset import FilterConfig
from carfield.encoder import EncoderConfig
from carfield.errors import ConfigError
from carfield.field import FieldConfig
from carfield.model import ModelConfig
from carfield.renderer import RendererConfig
from carfield.training import TrainingConfig

Preset = Literal["desk", "paper"]


class Paths(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: str | None = None  # manifest.jsonl
    checkpoints: str = "checkpoints"
    outputs: str = "outputs"


class RunConfig(BaseModel):
    """Everything a command needs; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    preset: Preset = "desk"
    seed: int = 0
    paths: Paths = Field(default_factory=Paths)
    field: FieldConfig
    encoder: EncoderConfig
    renderer: RendererConfig
    training: TrainingConfig
    ttopt: TrainingConfig
    filter: FilterConfig = Field(default_factory=FilterConfig)

    def model(self) -> ModelConfig:
        return ModelConfig(field=self.field, encoder=self.encoder, renderer=self.renderer)


def preset(name: Preset) -> dict[str, Any]:
    """Raw values of a preset, before any file or flag overrides."""
    if name == "desk":
        width = 64
        return {
            "preset": "desk",
            "field": {"width": width, "shape_depth": 4, "skip_layer": 2, "texture_depth": 1},
            "encoder": {"latent_dim": width, "channels": [16, 32, 64, 64], "resolution": 64},
            "renderer": {"n_coarse": 32, "n_fine": 32},
            "training": {
                "batch_size": 1024,
                "steps": 20000,
                "lr": 2e-3,
                "lr_final": 2e-4,
                "step_max": 20000,
            },
            "ttopt": {"batch_size": 1024, "steps": 500, "lr": 5e-4, "lr_final": 5e-4, "log_every": 25},
        }
    if name == "paper":
        width = 128
        return {
            "preset": "paper",
            "field": {"width": width, "shape_depth": 8, "skip_layer": 4, "texture_depth": 2},
            "encoder": {"latent_dim": width, "channels": [16, 32, 64, 128], "resolution": 64},
            "renderer": {"n_coarse": 64, "n_fine": 64},
            "training": {
                "batch_size": 3072,
                "steps": 500_000,
                "lr": 1e-3,
                "lr_final": 1e-4,
                "step_max": 200_000,
            },
            "ttopt": {"batch_size": 3072, "steps": 20000, "lr": 1e-4, "lr_final": 1e-5, "log_every": 250},
        }
    raise ConfigError(f"unknown preset {name!r}")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(
    file_values: dict | None = None, overrides: dict | None = None, preset_name: Preset | None = None
) -> RunConfig:
    """Preset values, then the config file, then command-line overrides."""
    file_values = file_values or {}
    name = preset_name or file_values.get("preset", "desk")
    raw = _merge(preset(name), file_values)
    raw = _merge(raw, overrides or {})
    raw["preset"] = name
    try:
        cfg = RunConfig.model_validate(raw)
        cfg.model()
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first["loc"]) or "model"
        raise ConfigError(f"invalid config at {loc}: {first['msg']}") from e
    # seeds of the stochastic parts follow the run seed unless set explicitly
    for section in ("training", "ttopt"):
        if "seed" not in (file_values.get(section) or {}) and "seed" not in ((overrides or {}).get(section) or {}):
            getattr(cfg, section).seed = cfg.seed
    return cfg


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            values = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON at byte offset {e.pos}: {e.msg}") from e
        if not isinstance(values, dict):
            raise ConfigError(f"{p}: top level must be an object")
    return build_config(values, overrides)
