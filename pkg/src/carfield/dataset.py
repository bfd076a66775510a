"""CarPatch3D records: schema, manifests, consistency filters, review queue.

A manifest is line-delimited JSON, one :class:`PatchRecord` per line.  Patch
and mask images are 8-bit PNGs referenced by paths relative to the
manifest's directory; masks hold only 0 and 255.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image, ImageDraw
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from carfield import geometry as geo
from carfield.errors import (
    BehindCameraError,
    ParseError,
    ReferencedFileError,
    SchemaError,
)
from carfield.synthetic import SyntheticScene

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
Source = Literal["KITTI-MOT", "KITTI-DET", "DVM", "SYNTH"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DimsModel(_Strict):
    length: float = Field(gt=0)
    height: float = Field(gt=0)
    width: float = Field(gt=0)


class Box3DModel(_Strict):
    center: tuple[float, float, float]
    dims: DimsModel
    yaw: float

    def to_box(self) -> geo.Box3D:
        return geo.Box3D(self.center, geo.CarDimensions(**self.dims.model_dump()), self.yaw)

    @classmethod
    def from_box(cls, box: geo.Box3D) -> Box3DModel:
        d = box.dims
        return cls(center=box.center, dims=DimsModel(length=d.length, height=d.height, width=d.width), yaw=box.yaw)


class IntrinsicsModel(_Strict):
    focal_x: float = Field(gt=0)
    focal_y: float = Field(gt=0)
    principal_x: float
    principal_y: float

    def to_intrinsics(self) -> geo.Intrinsics:
        return geo.Intrinsics(**self.model_dump())


class Confidences(_Strict):
    det2d: float = Field(ge=0, le=1)
    det3d: float = Field(ge=0, le=1)
    seg: float = Field(ge=0, le=1)


class PatchRecord(_Strict):
    """One car patch with its mask, intrinsics, boxes and confidences.

    ``intrinsics`` and ``box2d`` refer to the full source image; the patch
    is the crop whose top-left pixel is ``crop_origin`` in that image.
    """

    schema_version: int = SCHEMA_VERSION
    id: str = Field(min_length=1)
    patch_path: str
    mask_path: str
    image_size: tuple[int, int]  # (width, height)
    crop_origin: tuple[int, int] = (0, 0)
    intrinsics: IntrinsicsModel
    box2d: tuple[float, float, float, float]
    box3d: Box3DModel
    instance_id: str | None = None
    source: Source
    confidences: Confidences
    synthetic: SyntheticScene | None = None

    @field_validator("box2d")
    @classmethod
    def _box_ordered(cls, v):
        if not (v[0] < v[2] and v[1] < v[3]):
            raise ValueError("box2d needs x_min < x_max and y_min < y_max")
        return v

    @model_validator(mode="after")
    def _box_in_image(self):
        w, h = self.image_size
        x0, y0, x1, y1 = self.box2d
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise ValueError(f"box2d {self.box2d} outside image of size {self.image_size}")
        return self

    def box(self) -> geo.Box2D:
        return geo.Box2D(*self.box2d)

    def patch_intrinsics(self) -> geo.Intrinsics:
        return self.intrinsics.to_intrinsics().shifted(*self.crop_origin)

    def canonical_pose(self) -> np.ndarray:
        return geo.box_canonical_pose(self.box3d.to_box())


# ---------------------------------------------------------------- images


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, optimize=False)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)


def load_patch(record: PatchRecord, root: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Patch as float (H, W, 3) in [0, 1] and mask as bool (H, W)."""
    root = Path(root)
    paths = {"patch": root / record.patch_path, "mask": root / record.mask_path}
    for what, p in paths.items():
        if not p.is_file():
            raise ReferencedFileError(f"record {record.id!r}: {what} file {p} not found")
    img = read_png(paths["patch"])
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    img = img[..., :3].astype(np.float64) / 255.0
    m = read_png(paths["mask"])
    if m.ndim == 3:
        m = m[..., 0]
    if not np.isin(m, (0, 255)).all():
        raise SchemaError(f"record {record.id!r}: mask {paths['mask']} has values other than 0 and 255")
    if m.shape != img.shape[:2]:
        raise SchemaError(f"record {record.id!r}: mask size {m.shape} differs from patch size {img.shape[:2]}")
    return img, m == 255


# ---------------------------------------------------------------- manifests


def record_line(record: PatchRecord) -> str:
    return json.dumps(record.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def write_dataset(records: Iterable[PatchRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(record_line(r) + "\n" for r in records)
    return path


def load_dataset(path: str | os.PathLike, check_files: bool = True) -> list[PatchRecord]:
    """Parse and validate a manifest; errors name the line and the field."""
    path = Path(path)
    records: list[PatchRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON at column {e.colno}: {e.msg}") from e
            try:
                rec = PatchRecord.model_validate(data)
            except ValidationError as e:
                first = e.errors()[0]
                loc = ".".join(str(p) for p in first["loc"])
                raise SchemaError(f"{path}:{lineno}: field {loc}: {first['msg']}") from e
            if rec.id in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if check_files:
                for what, rel in (("patch", rec.patch_path), ("mask", rec.mask_path)):
                    if not (path.parent / rel).is_file():
                        raise ReferencedFileError(f"{path}:{lineno}: record {rec.id!r}: {what} file {rel} not found")
            records.append(rec)
    return records


# ---------------------------------------------------------------- filtering


class FilterConfig(_Strict):
    iou_min: float = Field(0.5, ge=0, le=1)
    mask_ratio_min: float = Field(0.5, ge=0, le=1)
    conf2d_min: float = Field(0.7, ge=0, le=1)
    conf3d_min: float = Field(0.7, ge=0, le=1)
    confseg_min: float = Field(0.7, ge=0, le=1)
    min_patch_pixels: int = Field(32 * 32, gt=0)
    review_band: float = Field(0.05, ge=0, le=1)


REASONS = ("too_small", "iou", "occlusion", "confidence")


@dataclass
class FilterResult:
    record_id: str
    keep: bool
    reason: str | None
    metrics: dict[str, float] = field(default_factory=dict)

    def borderline(self, cfg: FilterConfig) -> bool:
        band = cfg.review_band
        pairs = [
            (self.metrics.get("iou"), cfg.iou_min),
            (self.metrics.get("mask_ratio"), cfg.mask_ratio_min),
            (self.metrics.get("det2d"), cfg.conf2d_min),
            (self.metrics.get("det3d"), cfg.conf3d_min),
            (self.metrics.get("seg"), cfg.confseg_min),
        ]
        return any(v is not None and abs(v - t) <= band for v, t in pairs)


def mask_ratio(record: PatchRecord, mask: np.ndarray) -> float:
    """Mask pixels inside box2d divided by the box2d area."""
    b = record.box()
    ox, oy = record.crop_origin
    h, w = mask.shape
    x0 = int(np.clip(math.floor(b.x_min) - ox, 0, w))
    x1 = int(np.clip(math.ceil(b.x_max) - ox, 0, w))
    y0 = int(np.clip(math.floor(b.y_min) - oy, 0, h))
    y1 = int(np.clip(math.ceil(b.y_max) - oy, 0, h))
    count = int(np.count_nonzero(mask[y0:y1, x0:x1]))
    return min(1.0, count / b.area)


def filter_record(record: PatchRecord, cfg: FilterConfig, mask: np.ndarray) -> FilterResult:
    """Keep or reject a record; the first failing check is the reason."""
    c = record.confidences
    box = record.box()
    metrics: dict[str, float] = {"patch_pixels": box.area, "det2d": c.det2d, "det3d": c.det3d, "seg": c.seg}
    try:
        proj = geo.project_box3d(record.box3d.to_box(), record.intrinsics.to_intrinsics())
        metrics["iou"] = geo.iou_2d(box, proj)
    except BehindCameraError:
        metrics["iou"] = 0.0
    metrics["mask_ratio"] = mask_ratio(record, mask)

    if box.area < cfg.min_patch_pixels:
        reason = "too_small"
    elif metrics["iou"] < cfg.iou_min:
        reason = "iou"
    elif metrics["mask_ratio"] < cfg.mask_ratio_min:
        reason = "occlusion"
    elif c.det2d < cfg.conf2d_min or c.det3d < cfg.conf3d_min or c.seg < cfg.confseg_min:
        reason = "confidence"
    else:
        reason = None
    return FilterResult(record.id, reason is None, reason, metrics)


def filter_records(records: Iterable[PatchRecord], cfg: FilterConfig, root: str | os.PathLike) -> list[FilterResult]:
    return [filter_record(r, cfg, load_patch(r, root)[1]) for r in records]


def reason_counts(results: Iterable[FilterResult]) -> dict[str, int]:
    counts = Counter(r.reason for r in results if not r.keep)
    return {reason: counts.get(reason, 0) for reason in REASONS}


# ---------------------------------------------------------------- review queue


def draw_wireframe(patch: np.ndarray, record: PatchRecord) -> Image.Image:
    """Patch with the reprojected 3D box drawn on top."""
    im = Image.fromarray(to_uint8(patch)).convert("RGB")
    scale = 4
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    try:
        uv = geo.project_points(record.box3d.to_box().corners(), record.patch_intrinsics())
    except BehindCameraError:
        return im
    uv = uv * scale
    # corners are ordered by (sx, sy, sz) bits; edges join corners differing in one bit
    for i in range(8):
        for bit in (1, 2, 4):
            j = i ^ bit
            if j > i:
                draw.line([tuple(uv[i]), tuple(uv[j])], fill=(0, 255, 0), width=1)
    x0, y0, x1, y1 = record.box2d
    ox, oy = record.crop_origin
    draw.rectangle([(x0 - ox) * scale, (y0 - oy) * scale, (x1 - ox) * scale, (y1 - oy) * scale], outline=(255, 0, 0))
    return im


def export_review_queue(
    records: list[PatchRecord],
    results: list[FilterResult],
    cfg: FilterConfig,
    root: str | os.PathLike,
    out_dir: str | os.PathLike,
    thumb: int = 128,
) -> Path:
    """Write overlays, a contact sheet and ``review.jsonl`` for borderline records.

    Returns the path of the review manifest (possibly empty).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.id: r for r in records}
    queue = [res for res in results if res.borderline(cfg)]
    thumbs = []
    with open(out_dir / "review.jsonl", "w", encoding="utf-8") as f:
        for res in queue:
            rec = by_id[res.record_id]
            patch, _ = load_patch(rec, root)
            overlay = draw_wireframe(patch, rec)
            rel = f"overlays/{rec.id}.png"
            (out_dir / "overlays").mkdir(exist_ok=True)
            overlay.save(out_dir / rel)
            thumbs.append(overlay.resize((thumb, thumb)))
            entry = {
                "id": rec.id,
                "status": "keep" if res.keep else "reject",
                "reason": res.reason,
                "metrics": res.metrics,
                "overlay": rel,
            }
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    if thumbs:
        cols = min(8, len(thumbs))
        rows = math.ceil(len(thumbs) / cols)
        sheet = Image.new("RGB", (cols * thumb, rows * thumb))
        for i, t in enumerate(thumbs):
            sheet.paste(t, ((i % cols) * thumb, (i // cols) * thumb))
        sheet.save(out_dir / "contact_sheet.png")
    return out_dir / "review.jsonl"


def parse_decisions(path: str | os.PathLike) -> dict[str, bool]:
    """Parse ``<record id> accept|reject`` lines; ``#`` starts a comment."""
    decisions: dict[str, bool] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("accept", "reject"):
                raise ParseError(f"{path}:{lineno}: expected '<id> accept|reject', got {raw.rstrip()!r}")
            decisions[parts[0]] = parts[1] == "accept"
    return decisions


def apply_decisions(
    records: list[PatchRecord], results: list[FilterResult], decisions: dict[str, bool]
) -> list[PatchRecord]:
    """Final dataset: automatic keeps, overridden by human decisions."""
    keep = {res.record_id: res.keep for res in results}
    keep.update({k: v for k, v in decisions.items() if k in keep})
    return [r for r in records if keep.get(r.id, False)]


# ---------------------------------------------------------------- ingestion


class DetectorBox3D(_Strict):
    center: tuple[float, float, float]
    dims: DimsModel
    yaw: float


class Detection(_Strict):
    box2d: tuple[float, float, float, float]
    box3d: DetectorBox3D
    scores: Confidences
    mask_path: str


def read_detections(path: Path) -> list[Detection]:
    """Parse one detector-output JSON file (a list of detections)."""
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON at byte offset {e.pos} (line {e.lineno}): {e.msg}") from e
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a JSON list of detections")
    out = []
    for i, item in enumerate(data):
        try:
            out.append(Detection.model_validate(item))
        except ValidationError as e:
            first = e.errors()[0]
            loc = ".".join(str(p) for p in first["loc"])
            raise SchemaError(f"{path}: detection {i}: field {loc}: {first['msg']}") from e
    return out


def ingest_detections(
    detections_dir: str | os.PathLike,
    images_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    source: Source = "KITTI-DET",
    reference_focal: float = 721.5,
    reference_width: float = 1242.0,
) -> list[PatchRecord]:
    """Crop patches and masks for every detection and build records.

    Each ``<stem>.json`` in ``detections_dir`` pairs with ``<stem>.png`` in
    ``images_dir``; detection mask paths are relative to ``detections_dir``
    and cover the full image.
    """
    det_dir, img_dir, out_dir = Path(detections_dir), Path(images_dir), Path(out_dir)
    records = []
    for det_file in sorted(det_dir.glob("*.json")):
        stem = det_file.stem
        img_path = img_dir / f"{stem}.png"
        if not img_path.is_file():
            raise ReferencedFileError(f"{det_file}: image {img_path} not found")
        image = read_png(img_path)
        if image.ndim == 2:
            image = np.repeat(image[..., None], 3, axis=-1)
        image = image[..., :3]
        h, w = image.shape[:2]
        k = geo.rough_intrinsics(w, h, reference_focal, reference_width)
        for i, det in enumerate(read_detections(det_file)):
            mpath = det_dir / det.mask_path
            if not mpath.is_file():
                raise ReferencedFileError(f"{det_file}: detection {i}: mask {mpath} not found")
            full_mask = read_png(mpath)
            if full_mask.ndim == 3:
                full_mask = full_mask[..., 0]
            x0, y0, x1, y1 = det.box2d
            cx0, cy0 = max(0, math.floor(x0)), max(0, math.floor(y0))
            cx1, cy1 = min(w, math.ceil(x1)), min(h, math.ceil(y1))
            rid = f"{stem}_{i:03d}"
            patch_rel, mask_rel = f"patches/{rid}.png", f"masks/{rid}.png"
            write_png(out_dir / patch_rel, np.ascontiguousarray(image[cy0:cy1, cx0:cx1]))
            write_png(out_dir / mask_rel, mask_to_uint8(full_mask[cy0:cy1, cx0:cx1] > 127))
            records.append(
                PatchRecord(
                    id=rid,
                    patch_path=patch_rel,
                    mask_path=mask_rel,
                    image_size=(w, h),
                    crop_origin=(cx0, cy0),
                    intrinsics=IntrinsicsModel(**k.__dict__),
                    box2d=(max(0.0, x0), max(0.0, y0), min(float(w), x1), min(float(h), y1)),
                    box3d=Box3DModel(center=det.box3d.center, dims=det.box3d.dims, yaw=geo.wrap_angle(det.box3d.yaw)),
                    source=source,
                    confidences=det.scores,
                )
            )
    return records


# ---------------------------------------------------------------- synthetic


def _tight_box(mask: np.ndarray) -> geo.Box2D | None:
    """Pixel-aligned bounding box of a mask, as a 2D detector would report it."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return geo.Box2D(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def synthetic_record(
    record_id: str,
    scene: SyntheticScene,
    box: geo.Box3D,
    k: geo.Intrinsics,
    resolution: int,
    out_dir: str | os.PathLike,
    instance_id: str | None = None,
) -> PatchRecord:
    """Render ground truth for one synthetic view and write its PNGs."""
    from carfield.synthetic import synth_render_gt

    out_dir = Path(out_dir)
    image, mask, _ = synth_render_gt(scene, geo.box_canonical_pose(box), k, (resolution, resolution))
    patch_rel, mask_rel = f"patches/{record_id}.png", f"masks/{record_id}.png"
    write_png(out_dir / patch_rel, to_uint8(image))
    write_png(out_dir / mask_rel, mask_to_uint8(mask))
    b2 = _tight_box(mask) or geo.project_box3d(box, k)
    clip = lambda v: float(min(max(v, 0.0), resolution))
    return PatchRecord(
        id=record_id,
        patch_path=patch_rel,
        mask_path=mask_rel,
        image_size=(resolution, resolution),
        intrinsics=IntrinsicsModel(**k.__dict__),
        box2d=(clip(b2.x_min), clip(b2.y_min), clip(b2.x_max), clip(b2.y_max)),
        box3d=Box3DModel.from_box(box),
        instance_id=instance_id,
        source="SYNTH",
        confidences=Confidences(det2d=1.0, det3d=1.0, seg=1.0),
        synthetic=scene,
    )


def build_synthetic_dataset(
    out_dir: str | os.PathLike,
    n_instances: int = 1,
    views_per_instance: int = 1,
    seed: int = 0,
    resolution: int = 64,
    azimuth_range: tuple[float, float] = (-math.pi, math.pi),
    scene: SyntheticScene | None = None,
) -> list[PatchRecord]:
    """Random car instances viewed from stratified azimuths; writes ``manifest.jsonl``.

    Azimuths are stratified over the whole dataset so consecutive records
    sweep the ring.  ``scene`` fixes the appearance of every instance.
    """
    from carfield.synthetic import fit_view, random_scene

    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    total = n_instances * views_per_instance
    lo, hi = azimuth_range
    records = []
    n = 0
    for i in range(n_instances):
        inst_scene = scene or random_scene(rng)
        dims = geo.CarDimensions(rng.uniform(3.6, 4.6), rng.uniform(1.4, 1.7), rng.uniform(1.6, 1.9))
        for v in range(views_per_instance):
            slot = v * n_instances + i  # each instance's views spread over the ring
            yaw = lo + (hi - lo) * (slot + rng.uniform(0.0, 1.0)) / total
            box, k = fit_view(
                dims, yaw, distance=rng.uniform(7.0, 12.0), camera_height=rng.uniform(1.2, 2.0), resolution=resolution
            )
            records.append(synthetic_record(f"syn{n:04d}", inst_scene, box, k, resolution, out_dir, f"car{i:03d}"))
            n += 1
    write_dataset(records, out_dir / "manifest.jsonl")
    return records
