"""Losses, optimizer schedule, training and test-time optimization."""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import json
import logging
import math
import os
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor, nn

from carfield import metrics
from carfield.checkpoint import save_checkpoint
from carfield.dataset import PatchRecord, load_patch
from carfield.encoding import Cone
from carfield.errors import ConfigError, NumericError
from carfield.field import LatentCode
from carfield.model import CarModel
from carfield.renderer import (
    RendererConfig,
    RenderOutput,
    image_uv,
    pixel_cones,
    render_rays,
)

log = logging.getLogger(__name__)


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_c: float = Field(0.1, ge=0)
    lambda_s: float = Field(0.2, ge=0)
    batch_size: int = Field(1024, gt=0)
    patches_per_step: int = Field(1, gt=0)
    steps: int = Field(20000, ge=0)
    lr: float = Field(1e-3, gt=0)
    lr_final: float = Field(1e-4, gt=0)
    step_max: int = Field(200_000, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: Literal["single-view", "multi-view"] = "single-view"
    log_every: int = Field(250, gt=0)
    checkpoint_every: int = Field(0, ge=0)  # 0 disables periodic checkpoints
    color_jitter: float = Field(0.0, ge=0)  # strength of paired photometric augmentation, 0 disables


@dataclass
class LossBreakdown:
    render: Tensor
    seg: Tensor
    total: Tensor
    lambda_s: float

    def as_dict(self) -> dict[str, float]:
        return {"L_r": self.render.item(), "L_s": self.seg.item(), "L": self.total.item()}


# ---------------------------------------------------------------- losses


def render_loss(out: RenderOutput, gt_rgb: Tensor, alpha: Tensor, lambda_c: float) -> Tensor:
    """Mask-gated photometric L2 on fine and coarse colors, batch mean."""
    a = alpha.to(gt_rgb.dtype)
    fine = torch.sum((out.rgb_fine - gt_rgb) ** 2, dim=-1)
    coarse = torch.sum((out.rgb_coarse - gt_rgb) ** 2, dim=-1)
    return torch.mean(a * (fine + lambda_c * coarse))


def seg_loss(out: RenderOutput, alpha: Tensor, lambda_c: float) -> Tensor:
    """Squared error between accumulated weights and the mask, batch mean; not gated."""
    a = alpha.to(out.acc_fine.dtype)
    return torch.mean((out.acc_fine - a) ** 2 + lambda_c * (out.acc_coarse - a) ** 2)


def total_loss(l_r, l_s, lambda_s: float):
    return l_r + lambda_s * l_s


# ---------------------------------------------------------------- optimizer


def lr_at(step: int, cfg: TrainingConfig) -> float:
    """Geometric decay from ``lr`` to ``lr_final`` over ``step_max`` steps, then flat."""
    frac = min(step, cfg.step_max) / cfg.step_max
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


class ScheduledRAdam:
    """RAdam whose learning rate follows :func:`lr_at`."""

    def __init__(self, params, cfg: TrainingConfig):
        self.cfg = cfg
        self.step_index = 0
        self.opt = torch.optim.RAdam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)

    @property
    def lr(self) -> float:
        return lr_at(self.step_index, self.cfg)

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def step(self) -> None:
        for g in self.opt.param_groups:
            g["lr"] = self.lr
        self.opt.step()
        self.step_index += 1


def optimizer_step(optimizer: ScheduledRAdam) -> None:
    optimizer.step()


# ---------------------------------------------------------------- views


@dataclass
class TrainView:
    record_id: str
    instance_id: str
    patch: Tensor  # (H, W, 3)
    mask: Tensor  # (H, W) bool
    cones: Cone  # one per pixel, row-major

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.mask.shape)

    @classmethod
    def from_arrays(cls, record: PatchRecord, patch: np.ndarray, mask: np.ndarray, dtype=torch.float32):
        h, w = mask.shape
        cones = pixel_cones(image_uv(h, w, dtype), record.patch_intrinsics(), record.canonical_pose(), dtype)
        return cls(
            record.id,
            record.instance_id or record.id,
            torch.as_tensor(patch, dtype=dtype),
            torch.as_tensor(mask, dtype=torch.bool),
            cones,
        )


def load_views(records: list[PatchRecord], root: str | os.PathLike, dtype=torch.float32) -> list[TrainView]:
    return [TrainView.from_arrays(r, *load_patch(r, root), dtype=dtype) for r in records]


@dataclass
class PixelBatch:
    cones: Cone
    rgb: Tensor
    alpha: Tensor
    latents: LatentCode  # per ray


def gather_batch(
    views: list[tuple[TrainView, TrainView]], latents: list[LatentCode], pixels: list[Tensor]
) -> PixelBatch:
    """Collect pixels of each target view, tagging every ray with its source latents."""
    o, d, r, rgb, alpha, zs, zt = [], [], [], [], [], [], []
    for (_, tgt), lat, pix in zip(views, latents, pixels):
        o.append(tgt.cones.origin[pix])
        d.append(tgt.cones.direction[pix])
        r.append(tgt.cones.radius[pix])
        rgb.append(tgt.patch.reshape(-1, 3)[pix])
        alpha.append(tgt.mask.reshape(-1)[pix])
        zs.append(lat.z_shape.expand(len(pix), -1))
        zt.append(lat.z_texture.expand(len(pix), -1))
    cat = lambda xs: torch.cat(xs, dim=0)
    return PixelBatch(Cone(cat(o), cat(d), cat(r)), cat(rgb), cat(alpha), LatentCode(cat(zs), cat(zt)))


def batch_loss(
    model: CarModel,
    batch: PixelBatch,
    cfg: TrainingConfig,
    generator: torch.Generator | None = None,
    render_cfg: RendererConfig | None = None,
    edges: tuple[Tensor, Tensor] | None = None,
) -> tuple[LossBreakdown, RenderOutput]:
    rc = render_cfg or model.config.renderer
    ec, ef = edges if edges is not None else (None, None)
    out = render_rays(model.field, batch.latents, batch.cones, rc, generator, ec, ef)
    l_r = render_loss(out, batch.rgb, batch.alpha, cfg.lambda_c)
    l_s = seg_loss(out, batch.alpha, cfg.lambda_c)
    return LossBreakdown(l_r, l_s, total_loss(l_r, l_s, cfg.lambda_s), cfg.lambda_s), out


def _pairs(views: list[TrainView], mode: str) -> dict[str, list[TrainView]]:
    groups: dict[str, list[TrainView]] = {}
    for v in views:
        groups.setdefault(v.instance_id, []).append(v)
    if mode == "multi-view":
        groups = {k: g for k, g in groups.items() if len(g) >= 2}
        if not groups:
            raise ConfigError("multi-view training needs instances with at least two views")
    return groups


def color_jitter(pair: tuple[TrainView, TrainView], strength: float, gen: torch.Generator):
    """Apply one random per-channel gain and offset to both views of a pair.

    Encoder input and photometric target change together, so the texture
    code sees far more colors than the dataset holds.
    """
    src, tgt = pair
    dtype = src.patch.dtype
    gain = torch.exp(strength * torch.randn(3, generator=gen)).to(dtype)
    offset = (0.5 * strength * (2 * torch.rand(3, generator=gen) - 1)).to(dtype)

    def apply(v: TrainView) -> TrainView:
        patch = torch.clamp(v.patch * gain + offset, 0, 1) * v.mask[..., None].to(dtype)
        return dataclasses.replace(v, patch=patch)

    a = apply(src)
    return a, (a if tgt is src else apply(tgt))


def _pick(views, groups, mode, gen) -> tuple[TrainView, TrainView]:
    if mode == "single-view":
        v = views[int(torch.randint(len(views), (1,), generator=gen))]
        return v, v
    keys = sorted(groups)
    g = groups[keys[int(torch.randint(len(keys), (1,), generator=gen))]]
    i, j = torch.randperm(len(g), generator=gen)[:2].tolist()
    return g[i], g[j]


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def view_psnr(model: CarModel, view: TrainView, latents: LatentCode | None = None, foreground: bool = True) -> float:
    """Fine-pass PSNR of a deterministic render against the view's patch."""
    lat = latents if latents is not None else model.encode(view.patch, view.mask)
    pred = render_view(model, view, lat)
    return metrics.psnr(pred, view.patch.numpy(), view.mask.numpy() if foreground else None)


@torch.no_grad()
def render_view(model: CarModel, view: TrainView, latents: LatentCode, fine: bool = True, acc: bool = False):
    cfg = model.config.renderer.model_copy(update={"jitter": False})
    h, w = view.shape
    parts_rgb, parts_acc = [], []
    for s in range(0, h * w, cfg.chunk):
        sl = slice(s, s + cfg.chunk)
        c = Cone(view.cones.origin[sl], view.cones.direction[sl], view.cones.radius[sl])
        out = render_rays(model.field, latents, c, cfg)
        parts_rgb.append(out.rgb_fine if fine else out.rgb_coarse)
        parts_acc.append(out.acc_fine if fine else out.acc_coarse)
    rgb = torch.cat(parts_rgb).reshape(h, w, 3).numpy()
    if acc:
        return rgb, torch.cat(parts_acc).reshape(h, w).numpy()
    return rgb


# ---------------------------------------------------------------- loops


def _check_finite(loss: LossBreakdown, step: int) -> None:
    if not all(math.isfinite(float(x.detach())) for x in (loss.render, loss.seg, loss.total)):
        raise NumericError(f"non-finite loss at step {step}: {loss.as_dict()}")


def _split(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


@dataclass
class TrainResult:
    history: list[dict]
    steps: int


def train(
    model: CarModel,
    views: list[TrainView],
    cfg: TrainingConfig,
    probe: TrainView | None = None,
    log_path: str | os.PathLike | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    callback: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Jointly optimize encoder and field on single- or multi-view supervision."""
    if not views:
        raise ConfigError("training needs a non-empty dataset")
    groups = _pairs(views, cfg.mode)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(model.field.parameters()) + list(model.encoder.parameters())
    opt = ScheduledRAdam(params, cfg)
    probe = probe or views[0]
    history: list[dict] = []
    with contextlib.ExitStack() as stack:
        log_file = stack.enter_context(open(log_path, "w", encoding="utf-8")) if log_path else None
        for step in range(cfg.steps):
            pairs = [_pick(views, groups, cfg.mode, gen) for _ in range(cfg.patches_per_step)]
            if cfg.color_jitter > 0:
                pairs = [color_jitter(pair, cfg.color_jitter, gen) for pair in pairs]
            lats = [model.encode(src.patch, src.mask) for src, _ in pairs]
            pixels = [
                torch.randint(tgt.mask.numel(), (n,), generator=gen)
                for (_, tgt), n in zip(pairs, _split(cfg.batch_size, cfg.patches_per_step))
            ]
            batch = gather_batch(pairs, lats, pixels)
            loss, _ = batch_loss(model, batch, cfg, gen)
            _check_finite(loss, step)
            lr = opt.lr
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            if callback:
                callback(step, loss)
            done = step + 1
            if done % cfg.log_every == 0 or done == cfg.steps:
                entry = {"step": done, **loss.as_dict(), "lr": lr, "psnr": _finite(view_psnr(model, probe))}
                history.append(entry)
                log.info("step %d L=%.5f psnr=%s", done, entry["L"], entry["psnr"])
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()
            if checkpoint_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{done:07d}.ckpt", model, {"step": done})
    return TrainResult(history, cfg.steps)


def _finite(x: float) -> float | None:
    return x if math.isfinite(x) else None


@dataclass
class TTOResult:
    model: CarModel
    history: list[dict]


def test_time_optimize(
    model: CarModel,
    targets: list[TrainView],
    cfg: TrainingConfig,
    log_path: str | os.PathLike | None = None,
) -> TTOResult:
    """Refine per-instance latents jointly with the field on target views.

    The encoder runs once per instance to initialize the latents and is
    frozen afterwards.  Works on a copy; ``model`` is left untouched.
    Latents of instances not among ``targets`` are carried over unchanged.
    """
    tuned = copy.deepcopy(model)
    for p in tuned.encoder.parameters():
        p.requires_grad_(False)
    by_inst: dict[str, list[TrainView]] = {}
    for v in targets:
        by_inst.setdefault(v.instance_id, []).append(v)
    free: dict[str, tuple[nn.Parameter, nn.Parameter]] = {}
    with torch.no_grad():
        for inst, vs in by_inst.items():
            lat = tuned.encode(vs[0].patch, vs[0].mask)
            free[inst] = (nn.Parameter(lat.z_shape.clone()), nn.Parameter(lat.z_texture.clone()))
    params = list(tuned.field.parameters()) + [p for pair in free.values() for p in pair]
    opt = ScheduledRAdam(params, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    insts = sorted(by_inst)

    def snapshot(step: int, loss: LossBreakdown | None) -> dict:
        entry = {"step": step}
        if loss is not None:
            entry.update(loss.as_dict())
            entry["lr"] = opt.lr
        entry["psnr"] = {
            inst: _finite(view_psnr(tuned, by_inst[inst][0], LatentCode(*(t.detach() for t in free[inst]))))
            for inst in insts
        }
        return entry

    history = [snapshot(0, None)]
    with contextlib.ExitStack() as stack:
        log_file = stack.enter_context(open(log_path, "w", encoding="utf-8")) if log_path else None
        for step in range(cfg.steps):
            chosen = [insts[int(torch.randint(len(insts), (1,), generator=gen))] for _ in range(cfg.patches_per_step)]
            pairs, lats = [], []
            for inst in chosen:
                vs = by_inst[inst]
                v = vs[int(torch.randint(len(vs), (1,), generator=gen))]
                pairs.append((v, v))
                lats.append(LatentCode(*free[inst]))
            pixels = [
                torch.randint(tgt.mask.numel(), (n,), generator=gen)
                for (_, tgt), n in zip(pairs, _split(cfg.batch_size, cfg.patches_per_step))
            ]
            loss, _ = batch_loss(tuned, gather_batch(pairs, lats, pixels), cfg, gen)
            _check_finite(loss, step)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            done = step + 1
            if done % cfg.log_every == 0 or done == cfg.steps:
                entry = snapshot(done, loss)
                history.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()
    for inst, (zs, zt) in free.items():
        tuned.latents[inst] = LatentCode(zs.detach().clone(), zt.detach().clone())
    for p in tuned.encoder.parameters():
        p.requires_grad_(True)
    return TTOResult(tuned, history)
