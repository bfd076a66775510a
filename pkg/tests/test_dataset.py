import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from carfield import geometry as geo
from carfield.dataset import (
    FilterConfig,
    PatchRecord,
    apply_decisions,
    build_synthetic_dataset,
    export_review_queue,
    filter_records,
    load_dataset,
    load_patch,
    parse_decisions,
    reason_counts,
    write_dataset,
)
from carfield.errors import ParseError, ReferencedFileError, SchemaError
from carfield.synthetic import SyntheticScene, synth_render_gt, synth_scene_sample

FIXTURES = Path(__file__).parent / "fixtures" / "filter"


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """Camera-to-canonical pose with an OpenGL-style camera (x right, y up, looking down -z)."""
    eye, target, up = (np.asarray(a, float) for a in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, true_up, -fwd, eye
    return pose


@pytest.fixture
def synth_dir(tmp_path):
    records = build_synthetic_dataset(tmp_path, n_instances=2, views_per_instance=2, seed=5, resolution=64)
    return tmp_path, records


def test_consistent_synthetic_record_kept(synth_dir):
    root, records = synth_dir
    results = filter_records(records, FilterConfig(), root)
    assert all(r.keep for r in results)
    assert all(r.metrics["iou"] > 0.6 for r in results)


def test_displaced_box_rejected_for_iou(synth_dir):
    root, records = synth_dir
    rec = records[0]
    b = rec.box3d.to_box()
    # slide the 3D box sideways until the projected IoU falls well below threshold
    moved = rec.model_copy(
        update={"box3d": rec.box3d.model_copy(update={"center": (b.center[0] + 6.0, *b.center[1:])})}
    )
    (res,) = filter_records([moved], FilterConfig(), root)
    assert not res.keep and res.reason == "iou"
    assert res.metrics["iou"] < 0.5


def test_partial_mask_rejected_for_occlusion(tmp_path):
    records = load_dataset(FIXTURES / "manifest.jsonl")
    (res,) = filter_records([r for r in records if r.id == "r03"], FilterConfig(), FIXTURES)
    assert res.reason == "occlusion"
    assert res.metrics["mask_ratio"] == pytest.approx(0.3, abs=0.02)


def test_filter_fixture_table():
    expected = json.loads((FIXTURES / "expected.json").read_text())
    records = load_dataset(FIXTURES / "manifest.jsonl")
    got = {r.record_id: {"keep": r.keep, "reason": r.reason} for r in filter_records(records, FilterConfig(), FIXTURES)}
    assert got == expected


def test_reason_counts_cover_all_reasons():
    records = load_dataset(FIXTURES / "manifest.jsonl")
    counts = reason_counts(filter_records(records, FilterConfig(), FIXTURES))
    assert counts == {"too_small": 2, "iou": 3, "occlusion": 2, "confidence": 2}


def test_empty_review_queue(tmp_path, synth_dir):
    root, records = synth_dir
    results = filter_records(records, FilterConfig(), root)
    manifest = export_review_queue(records, results, FilterConfig(review_band=0.0), root, tmp_path / "review")
    assert manifest.read_text() == ""


def test_review_queue_lists_borderline(tmp_path):
    records = load_dataset(FIXTURES / "manifest.jsonl")
    results = filter_records(records, FilterConfig(), FIXTURES)
    manifest = export_review_queue(records, results, FilterConfig(), FIXTURES, tmp_path / "review")
    ids = [json.loads(line)["id"] for line in manifest.read_text().splitlines()]
    assert ids == ["r11"]  # confidences sit exactly on the threshold
    assert (tmp_path / "review" / "overlays" / "r11.png").is_file()
    assert (tmp_path / "review" / "contact_sheet.png").is_file()


def test_decisions_override_automatic_result(tmp_path):
    records = load_dataset(FIXTURES / "manifest.jsonl")
    results = filter_records(records, FilterConfig(), FIXTURES)
    path = tmp_path / "decisions.txt"
    path.write_text("# reviewer pass\nr02 accept\nr11 reject  # too close\n\n")
    final = {r.id for r in apply_decisions(records, results, parse_decisions(path))}
    assert final == {"r01", "r02", "r10"}


def test_malformed_decisions_name_line(tmp_path):
    path = tmp_path / "decisions.txt"
    path.write_text("r01 accept\nr02 maybe\n")
    with pytest.raises(ParseError, match=":2:"):
        parse_decisions(path)


def test_round_trip(synth_dir, tmp_path):
    root, records = synth_dir
    path = write_dataset(records, root / "copy.jsonl")
    assert load_dataset(path) == records


def test_missing_mask_names_record(synth_dir):
    root, records = synth_dir
    (root / records[1].mask_path).unlink()
    with pytest.raises(ReferencedFileError, match=records[1].id):
        load_dataset(root / "manifest.jsonl")


def test_unknown_source_rejected(synth_dir):
    root, _ = synth_dir
    lines = (root / "manifest.jsonl").read_text().splitlines()
    data = json.loads(lines[0])
    data["source"] = "WAYMO"
    lines[0] = json.dumps(data)
    (root / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="source"):
        load_dataset(root / "bad.jsonl")


def test_invalid_json_line(tmp_path):
    (tmp_path / "m.jsonl").write_text("{not json\n")
    with pytest.raises(ParseError, match=":1:"):
        load_dataset(tmp_path / "m.jsonl")


def test_box_outside_image_rejected():
    rec = json.loads((FIXTURES / "manifest.jsonl").read_text().splitlines()[0])
    rec["box2d"] = [0, 0, 500, 10]
    with pytest.raises(ValueError):
        PatchRecord.model_validate(rec)


def test_load_patch_shapes(synth_dir):
    root, records = synth_dir
    patch, mask = load_patch(records[0], root)
    assert patch.shape == (64, 64, 3) and mask.shape == (64, 64)
    assert patch.dtype == np.float64 and mask.dtype == bool
    assert 0.0 <= patch.min() and patch.max() <= 1.0


def test_copy_of_fixture_tree_filters_identically(tmp_path):
    shutil.copytree(FIXTURES, tmp_path / "f")
    a = filter_records(load_dataset(FIXTURES / "manifest.jsonl"), FilterConfig(), FIXTURES)
    b = filter_records(load_dataset(tmp_path / "f" / "manifest.jsonl"), FilterConfig(), tmp_path / "f")
    assert [(r.record_id, r.reason) for r in a] == [(r.record_id, r.reason) for r in b]


# ---------------------------------------------------------------- synthetic scene


def test_scene_sample_far_point_empty():
    sigma, _ = synth_scene_sample(SyntheticScene(), np.array([[5.0, 5.0, 5.0]]))
    assert sigma[0] == 0.0


def test_scene_sample_interior_and_boundary():
    scene = SyntheticScene()
    cx, cy, cz = scene.body_center
    hx = scene.body_half[0]
    sigma, _ = synth_scene_sample(scene, np.array([[cx, cy, cz], [cx + hx, cy, cz]]))
    assert sigma[0] == pytest.approx(scene.density_scale)
    assert sigma[1] == pytest.approx(scene.density_scale / 2)


def test_scene_colors_in_unit_cube(rng):
    _, color = synth_scene_sample(SyntheticScene(), rng.uniform(-1.2, 1.2, size=(2000, 3)))
    assert color.min() >= 0.0 and color.max() <= 1.0


def test_scene_must_fit_cube():
    with pytest.raises(ValueError):
        SyntheticScene(body_half=(1.0, 0.4, 0.8))


K = geo.Intrinsics(30.0, 30.0, 16.0, 16.0)


def test_camera_facing_away_renders_black():
    pose = look_at((0.0, -1.0, 6.0), target=(0.0, -1.0, 12.0))
    image, mask, acc = synth_render_gt(SyntheticScene(), pose, K, (32, 32))
    assert image.max() == 0.0 and not mask.any() and acc.max() == 0.0


def test_render_converges_in_samples():
    pose = look_at((5.0, -2.0, 4.0))
    a, _, acc_a = synth_render_gt(SyntheticScene(), pose, K, (32, 32), n_samples=512)
    b, _, acc_b = synth_render_gt(SyntheticScene(), pose, K, (32, 32), n_samples=1024)
    assert np.abs(a - b).max() < 1e-3
    assert np.abs(acc_a - acc_b).max() < 1e-3


def test_mirrored_pose_mirrors_image():
    scene = SyntheticScene()  # symmetric under z -> -z
    pose = look_at((5.0, -2.0, 4.0))
    mirror = np.diag([1.0, 1.0, -1.0, 1.0])
    flip_x = np.diag([-1.0, 1.0, 1.0, 1.0])
    a, ma, _ = synth_render_gt(scene, pose, K, (32, 32))
    b, mb, _ = synth_render_gt(scene, mirror @ pose @ flip_x, K, (32, 32))
    np.testing.assert_allclose(b, a[:, ::-1], atol=1e-9)
    np.testing.assert_array_equal(mb, ma[:, ::-1])
    assert ma.any()
