"""Scene graphs of car instances composited over a static background plate."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Literal, Protocol

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from carfield import geometry as geo
from carfield.dataset import (
    Box3DModel,
    IntrinsicsModel,
    PatchRecord,
    load_dataset,
    load_patch,
    read_png,
)
from carfield.encoding import Cone
from carfield.errors import ConfigError, SchemaError
from carfield.field import LatentCode
from carfield.model import CarModel
from carfield.renderer import image_uv, pixel_cones, render_rays


@dataclass(frozen=True)
class SceneInstance:
    id: str
    latents: LatentCode
    box: geo.Box3D

    @property
    def dims(self) -> geo.CarDimensions:
        return self.box.dims


@dataclass(frozen=True)
class SceneGraph:
    """Background plate, its camera and a list of instances.

    ``camera_pose`` maps world points into the (OpenCV) camera frame; instance
    boxes live in world coordinates.
    """

    plate: np.ndarray  # (H, W, 3) float in [0, 1]
    intrinsics: geo.Intrinsics
    camera_pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    instances: tuple[SceneInstance, ...] = ()

    def __post_init__(self):
        ids = [i.id for i in self.instances]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate instance ids in scene: {ids}")
        object.__setattr__(self, "instances", tuple(self.instances))

    def index(self, instance_id: str) -> int:
        for n, inst in enumerate(self.instances):
            if inst.id == instance_id:
                return n
        raise KeyError(f"no instance {instance_id!r} in scene")

    def get(self, instance_id: str) -> SceneInstance:
        return self.instances[self.index(instance_id)]

    def cam_car(self, inst: SceneInstance) -> np.ndarray:
        return np.asarray(self.camera_pose) @ inst.box.pose()


class InstanceRenderer(Protocol):
    def __call__(
        self, latents: LatentCode, uv: torch.Tensor, k: geo.Intrinsics, pose: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Premultiplied rgb (N, 3) and acc (N,) for pixels ``uv`` (N, 2)."""


class FieldRenderer:
    """Renders instances with a trained field, deterministically."""

    def __init__(self, model: CarModel, fine: bool = True):
        self.model = model
        self.fine = fine
        self.config = model.config.renderer.model_copy(update={"jitter": False})

    @torch.no_grad()
    def __call__(self, latents, uv, k, pose):
        dtype = self.model.dtype
        cones = pixel_cones(uv, k, pose, dtype)
        lat = LatentCode(latents.z_shape.to(dtype), latents.z_texture.to(dtype))
        rgb, acc = [], []
        for s in range(0, cones.direction.shape[0], self.config.chunk):
            sl = slice(s, s + self.config.chunk)
            out = render_rays(
                self.model.field, lat, Cone(cones.origin[sl], cones.direction[sl], cones.radius[sl]), self.config
            )
            rgb.append(out.rgb_fine if self.fine else out.rgb_coarse)
            acc.append(out.acc_fine if self.fine else out.acc_coarse)
        return torch.cat(rgb).double().numpy(), torch.cat(acc).double().numpy()


@dataclass
class SceneRender:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W) total instance coverage
    layers: dict[str, np.ndarray]  # per-instance acc maps, full image size


def footprint(graph: SceneGraph, inst: SceneInstance) -> tuple[int, int, int, int] | None:
    """Pixel rectangle ``(x0, y0, x1, y1)`` covered by the projected box, or None."""
    h, w = graph.plate.shape[:2]
    corners = geo.apply_transform(np.asarray(graph.camera_pose), inst.box.corners())
    in_front = corners[:, 2] > 1e-6
    if not in_front.any():
        return None
    if not in_front.all():
        return 0, 0, w, h
    uv = geo.project_points(corners, graph.intrinsics)
    x0 = max(0, math.floor(uv[:, 0].min()))
    y0 = max(0, math.floor(uv[:, 1].min()))
    x1 = min(w, math.ceil(uv[:, 0].max()))
    y1 = min(h, math.ceil(uv[:, 1].max()))
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, x1, y1


def instance_depth(graph: SceneGraph, inst: SceneInstance) -> float:
    return float(graph.cam_car(inst)[2, 3])


def render_instance(
    graph: SceneGraph, inst: SceneInstance, renderer: InstanceRenderer
) -> tuple[np.ndarray, np.ndarray]:
    """Full-size premultiplied rgb and acc layers for one instance."""
    h, w = graph.plate.shape[:2]
    rgb = np.zeros((h, w, 3))
    acc = np.zeros((h, w))
    rect = footprint(graph, inst)
    if rect is None:
        return rgb, acc
    x0, y0, x1, y1 = rect
    uv = image_uv(y1 - y0, x1 - x0, torch.float64)
    uv[:, 0] += x0
    uv[:, 1] += y0
    pose = geo.canonical_cam_pose(geo.scaled_cam_transform(inst.dims), graph.cam_car(inst))
    c, a = renderer(inst.latents, uv, graph.intrinsics, pose)
    rgb[y0:y1, x0:x1] = np.asarray(c).reshape(y1 - y0, x1 - x0, 3)
    acc[y0:y1, x0:x1] = np.asarray(a).reshape(y1 - y0, x1 - x0)
    return rgb, acc


def render_scene(graph: SceneGraph, renderer: InstanceRenderer) -> SceneRender:
    """Front-to-back alpha compositing of instance renders over the plate."""
    plate = np.asarray(graph.plate, dtype=np.float64)
    out = np.zeros_like(plate)
    trans = np.ones(plate.shape[:2])
    layers = {}
    for inst in sorted(graph.instances, key=lambda i: instance_depth(graph, i)):
        rgb, acc = render_instance(graph, inst, renderer)
        out += trans[..., None] * rgb
        trans *= 1.0 - acc
        layers[inst.id] = acc
    out += trans[..., None] * plate
    return SceneRender(out, 1.0 - trans, layers)


# ---------------------------------------------------------------- edits


def _replace_instance(graph: SceneGraph, instance_id: str, **changes) -> SceneGraph:
    n = graph.index(instance_id)
    insts = list(graph.instances)
    insts[n] = dataclasses.replace(insts[n], **changes)
    return dataclasses.replace(graph, instances=tuple(insts))


def edit_insert(graph: SceneGraph, inst: SceneInstance) -> SceneGraph:
    return dataclasses.replace(graph, instances=graph.instances + (inst,))


def edit_transform(graph: SceneGraph, instance_id: str, box: geo.Box3D) -> SceneGraph:
    return _replace_instance(graph, instance_id, box=box)


def edit_delete(graph: SceneGraph, instance_id: str) -> SceneGraph:
    graph.index(instance_id)
    return dataclasses.replace(graph, instances=tuple(i for i in graph.instances if i.id != instance_id))


def edit_replace(graph: SceneGraph, instance_id: str, latents: LatentCode) -> SceneGraph:
    return _replace_instance(graph, instance_id, latents=latents)


def tint_patch(patch: np.ndarray, mask: np.ndarray, tint, alpha: float) -> np.ndarray:
    """Blend ``tint`` into the masked pixels of ``patch`` with opacity ``alpha``."""
    p = np.asarray(patch, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)[..., None]
    blended = (1.0 - alpha) * p + alpha * np.asarray(tint, dtype=np.float64)
    return np.where(m, blended, p)


@torch.no_grad()
def edit_appearance(
    patch: np.ndarray, mask: np.ndarray, tint, alpha: float, model: CarModel, z_shape: torch.Tensor
) -> LatentCode:
    """Re-encode a tinted patch; keep ``z_shape`` so geometry is untouched."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"tint alpha must lie in [0, 1], got {alpha}")
    tinted = tint_patch(patch, mask, tint, alpha)
    lat = model.encode(torch.as_tensor(tinted, dtype=model.dtype), torch.as_tensor(np.asarray(mask, dtype=bool)))
    return LatentCode(z_shape, lat.z_texture)


# ---------------------------------------------------------------- scene files


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LatentRef(_Strict):
    """Latents by checkpoint instance key, or by encoding a manifest record."""

    latent: str | None = None
    record: str | None = None


class InstanceSpec(LatentRef):
    id: str
    box3d: Box3DModel


class InsertOp(InstanceSpec):
    op: Literal["insert"]


class DeleteOp(_Strict):
    op: Literal["delete"]
    id: str


class TransformOp(_Strict):
    op: Literal["transform"]
    id: str
    box3d: Box3DModel


class ReplaceOp(LatentRef):
    op: Literal["replace"]
    id: str


class AppearanceOp(_Strict):
    op: Literal["appearance"]
    id: str
    record: str  # patch to tint and re-encode
    tint: tuple[float, float, float]
    alpha: float = Field(ge=0, le=1)


EditOp = Annotated[InsertOp | DeleteOp | TransformOp | ReplaceOp | AppearanceOp, Field(discriminator="op")]


class SceneFile(_Strict):
    plate: str | None = None  # PNG path, relative to the scene file
    plate_color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    image_size: tuple[int, int] | None = None  # (width, height); required without a plate
    intrinsics: IntrinsicsModel
    camera_pose: list[list[float]] | None = None
    manifest: str | None = None  # for record references, relative to the scene file
    instances: list[InstanceSpec] = []
    edits: list[EditOp] = []


class _Resolver:
    def __init__(self, scene: SceneFile, base: Path, model: CarModel):
        self.model = model
        self.base = base
        self.records: dict[str, PatchRecord] = {}
        self.root = base
        if scene.manifest:
            mpath = base / scene.manifest
            self.records = {r.id: r for r in load_dataset(mpath)}
            self.root = mpath.parent

    def patch(self, record_id: str) -> tuple[np.ndarray, np.ndarray]:
        if record_id not in self.records:
            raise SchemaError(f"scene references unknown record {record_id!r}")
        return load_patch(self.records[record_id], self.root)

    def latents(self, ref: LatentRef) -> LatentCode:
        if (ref.latent is None) == (ref.record is None):
            raise SchemaError("exactly one of 'latent' and 'record' must be given")
        if ref.latent is not None:
            if ref.latent not in self.model.latents:
                raise SchemaError(f"checkpoint has no latents for {ref.latent!r}")
            return self.model.latents[ref.latent]
        patch, mask = self.patch(ref.record)
        with torch.no_grad():
            return self.model.encode(torch.as_tensor(patch, dtype=self.model.dtype), torch.as_tensor(mask))


def load_scene(path: str | os.PathLike, model: CarModel) -> SceneGraph:
    """Parse a scene file, build its graph and apply its edit ops in order."""
    path = Path(path)
    scene = SceneFile.model_validate_json(path.read_text(encoding="utf-8"))
    base = path.parent
    if scene.plate:
        plate = read_png(base / scene.plate)[..., :3].astype(np.float64) / 255.0
    elif scene.image_size:
        w, h = scene.image_size
        plate = np.broadcast_to(np.asarray(scene.plate_color, dtype=np.float64), (h, w, 3)).copy()
    else:
        raise SchemaError(f"{path}: scene needs 'plate' or 'image_size'")
    res = _Resolver(scene, base, model)
    graph = SceneGraph(
        plate,
        scene.intrinsics.to_intrinsics(),
        np.asarray(scene.camera_pose, dtype=np.float64) if scene.camera_pose else np.eye(4),
        tuple(SceneInstance(s.id, res.latents(s), s.box3d.to_box()) for s in scene.instances),
    )
    for op in scene.edits:
        graph = _apply_op(graph, op, res)
    return graph


def _apply_op(graph: SceneGraph, op, res: _Resolver) -> SceneGraph:
    if isinstance(op, InsertOp):
        return edit_insert(graph, SceneInstance(op.id, res.latents(op), op.box3d.to_box()))
    if isinstance(op, DeleteOp):
        return edit_delete(graph, op.id)
    if isinstance(op, TransformOp):
        return edit_transform(graph, op.id, op.box3d.to_box())
    if isinstance(op, ReplaceOp):
        return edit_replace(graph, op.id, res.latents(op))
    patch, mask = res.patch(op.record)
    lat = edit_appearance(patch, mask, op.tint, op.alpha, res.model, graph.get(op.id).latents.z_shape)
    return edit_replace(graph, op.id, lat)
