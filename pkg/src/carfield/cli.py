"""Command-line entry points.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure, 4 finished with warnings (for example, no input).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from carfield import geometry as geo
from carfield import metrics
from carfield.checkpoint import load_checkpoint, save_checkpoint
from carfield.config import RunConfig, load_config
from carfield.dataset import (
    PatchRecord,
    apply_decisions,
    build_synthetic_dataset,
    export_review_queue,
    filter_records,
    ingest_detections,
    load_dataset,
    load_patch,
    parse_decisions,
    read_png,
    reason_counts,
    to_uint8,
    write_dataset,
    write_png,
)
from carfield.errors import CarfieldError, ConfigError, DataError, NumericError
from carfield.model import CarModel
from carfield.synthetic import SyntheticScene
from carfield.training import TrainView, load_views, render_view, test_time_optimize, train

log = logging.getLogger("carfield")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_WARN = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--threads", type=int, help="torch intra-op threads")
    p.add_argument("--single-thread", action="store_true", help="one thread, deterministic kernels")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="carfield", description="Latent-conditioned car radiance fields.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-dataset", help="crop, filter and review detector outputs")
    _common(p)
    p.add_argument("--detections", required=True, help="directory of <stem>.json detector files")
    p.add_argument("--images", required=True, help="directory of <stem>.png images")
    p.add_argument("--source", default="KITTI-DET", choices=["KITTI-MOT", "KITTI-DET", "DVM"])
    p.add_argument("--decisions", help="review decisions file (<id> accept|reject per line)")

    p = sub.add_parser("synth", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--scene", help="JSON synthetic scene shared by every instance")
    p.add_argument("--views", type=int, default=1, help="views per instance")
    p.add_argument("--instances", type=int, default=1)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--azimuth-min", type=float, default=-180.0, help="degrees")
    p.add_argument("--azimuth-max", type=float, default=180.0, help="degrees")

    p = sub.add_parser("train", help="train encoder and field")
    _common(p)
    p.add_argument("--manifest", help="dataset manifest (overrides paths.dataset)")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=["single-view", "multi-view"])

    p = sub.add_parser("ttopt", help="test-time optimize latents and field")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--records", nargs="*", help="restrict to these record ids")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("render", help="render a record or an azimuth sweep")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--record", required=True, help="record whose instance and camera are used")
    p.add_argument("--sweep", type=int, default=0, help="render N frames over a 360 degree azimuth ring")

    p = sub.add_parser("edit", help="compose a scene file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM against ground-truth patches")
    _common(p)
    p.add_argument("--checkpoint", help="model to render with (unless --renders is given)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--renders", help="directory of <record id>.png renders to score instead")
    p.add_argument("--full", action="store_true", help="score full frames instead of foreground pixels")
    return parser


# ---------------------------------------------------------------- helpers


def _setup(args) -> RunConfig:
    if args.single_thread:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif args.threads:
        torch.set_num_threads(args.threads)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    torch.manual_seed(cfg.seed)
    return cfg


def _out(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.paths.outputs)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _views_for(records: list[PatchRecord], manifest: Path, dtype) -> list[TrainView]:
    return load_views(records, manifest.parent, dtype)


def _latents(model: CarModel, view: TrainView):
    with torch.no_grad():
        return model.latent_for(view.instance_id, view.patch, view.mask)


def _save_render(out: Path, name: str, rgb: np.ndarray, acc: np.ndarray) -> None:
    from matplotlib import colormaps

    write_png(out / f"{name}.png", to_uint8(rgb))
    write_png(out / f"{name}_acc.png", to_uint8(colormaps["turbo"](np.clip(acc, 0, 1))[..., :3]))
    np.save(out / f"{name}_acc.npy", acc.astype(np.float32))


# ---------------------------------------------------------------- commands


def cmd_build_dataset(args, cfg: RunConfig) -> int:
    out = _out(args, cfg)
    records = ingest_detections(args.detections, args.images, out, args.source)
    results = filter_records(records, cfg.filter, out)
    export_review_queue(records, results, cfg.filter, out, out / "review")
    decisions = parse_decisions(args.decisions) if args.decisions else {}
    kept = apply_decisions(records, results, decisions)
    write_dataset(kept, out / "manifest.jsonl")
    report = {
        "total": len(records),
        "kept": len(kept),
        "rejected_by_reason": reason_counts(results),
        "rejected": [{"id": r.record_id, "reason": r.reason, "metrics": r.metrics} for r in results if not r.keep],
    }
    (out / "rejections.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"kept {len(kept)} of {len(records)} records -> {out / 'manifest.jsonl'}")
    if not records:
        log.warning("no detections found in %s", args.detections)
        return EXIT_WARN
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    if args.views < 1 or args.instances < 1:
        raise UsageError("--views and --instances must be positive")
    out = _out(args, cfg)
    scene = None
    if args.scene:
        scene = SyntheticScene.model_validate_json(Path(args.scene).read_text(encoding="utf-8"))
    recs = build_synthetic_dataset(
        out,
        n_instances=args.instances,
        views_per_instance=args.views,
        seed=cfg.seed,
        resolution=args.resolution,
        azimuth_range=(math.radians(args.azimuth_min), math.radians(args.azimuth_max)),
        scene=scene,
    )
    print(f"wrote {len(recs)} records -> {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = args.manifest or cfg.paths.dataset
    if not manifest:
        raise UsageError("no dataset: pass --manifest or set paths.dataset")
    manifest = Path(manifest)
    tcfg = cfg.training
    updates = {k: v for k, v in (("steps", args.steps), ("mode", args.mode)) if v is not None}
    tcfg = tcfg.model_copy(update=updates)
    out = _out(args, cfg)
    model = CarModel(cfg.model())
    records = load_dataset(manifest)
    views = _views_for(records, manifest, model.dtype)
    train(model, views, tcfg, log_path=out / "train_log.jsonl", checkpoint_dir=out)
    path = save_checkpoint(out / "model.ckpt", model, {"command": "train", "steps": tcfg.steps, "seed": tcfg.seed})
    print(f"checkpoint -> {path}")
    return EXIT_OK


def cmd_ttopt(args, cfg: RunConfig) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    manifest = Path(args.manifest)
    records = load_dataset(manifest)
    if args.records:
        wanted = set(args.records)
        missing = wanted - {r.id for r in records}
        if missing:
            raise DataError(f"records not in manifest: {sorted(missing)}")
        records = [r for r in records if r.id in wanted]
    tcfg = cfg.ttopt.model_copy(update={"steps": args.steps} if args.steps is not None else {})
    out = _out(args, cfg)
    views = _views_for(records, manifest, model.dtype)
    result = test_time_optimize(model, views, tcfg, log_path=out / "ttopt_log.jsonl")
    meta = {**meta, "ttopt_steps": tcfg.steps, "ttopt_instances": sorted({v.instance_id for v in views})}
    path = save_checkpoint(out / "model_tto.ckpt", result.model, meta)
    print(f"checkpoint -> {path}")
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = Path(args.manifest)
    records = {r.id: r for r in load_dataset(manifest)}
    if args.record not in records:
        raise DataError(f"record {args.record!r} not in {manifest}")
    rec = records[args.record]
    view = _views_for([rec], manifest, model.dtype)[0]
    lat = _latents(model, view)
    out = _out(args, cfg)
    if args.sweep <= 0:
        rgb, acc = render_view(model, view, lat, acc=True)
        _save_render(out, rec.id, rgb, acc)
        print(f"rendered {rec.id} -> {out}")
        return EXIT_OK
    box = rec.box3d.to_box()
    # orbit: rotate the car in place about its vertical axis
    for i in range(args.sweep):
        yaw = box.yaw + 2.0 * math.pi * i / args.sweep
        moved = rec.model_copy(update={"box3d": rec.box3d.model_copy(update={"yaw": geo.wrap_angle(yaw)})})
        v = TrainView.from_arrays(moved, view.patch.numpy(), view.mask.numpy(), model.dtype)
        rgb, acc = render_view(model, v, lat, acc=True)
        _save_render(out, f"{rec.id}_{i:03d}", rgb, acc)
    print(f"rendered {args.sweep} frames -> {out}")
    return EXIT_OK


def cmd_edit(args, cfg: RunConfig) -> int:
    from carfield.editor import FieldRenderer, load_scene, render_scene

    model, _ = load_checkpoint(args.checkpoint)
    graph = load_scene(args.scene, model)
    result = render_scene(graph, FieldRenderer(model))
    out = _out(args, cfg)
    write_png(out / "edit.png", to_uint8(result.image))
    print(f"composited {len(graph.instances)} instances -> {out / 'edit.png'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    records = load_dataset(manifest)
    if not args.renders and not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --renders")
    model = load_checkpoint(args.checkpoint)[0] if args.checkpoint and not args.renders else None
    dtype = model.dtype if model is not None else torch.float32
    reports = []
    for rec, view in zip(records, _views_for(records, manifest, dtype)):
        gt, mask = load_patch(rec, manifest.parent)
        mask = None if args.full else mask
        if args.renders:
            path = Path(args.renders) / f"{rec.id}.png"
            if not path.is_file():
                raise DataError(f"missing render {path}")
            pred = read_png(path)[..., :3].astype(np.float64) / 255.0
        else:
            pred = render_view(model, view, _latents(model, view)).astype(np.float64)
        reports.append(metrics.evaluate(rec.id, pred, gt, mask))
    finite = [r.psnr for r in reports if r.psnr is not None]
    summary = {
        "mask_mode": "full" if args.full else "foreground",
        "count": len(reports),
        "psnr_mean": float(np.mean(finite)) if finite else None,
        "psnr_infinite": any(r.psnr_infinite for r in reports),
        "ssim_mean": float(np.mean([r.ssim for r in reports])) if reports else None,
        "records": [r.model_dump() for r in reports],
    }
    out = _out(args, cfg)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({k: v for k, v in summary.items() if k != "records"}))
    return EXIT_OK


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "synth": cmd_synth,
    "train": cmd_train,
    "ttopt": cmd_ttopt,
    "render": cmd_render,
    "edit": cmd_edit,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("CARFIELD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = _setup(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValidationError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CarfieldError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
