"""Regenerate the 12-record filter fixture set.

Run from this directory: ``python3 build_fixtures.py``.  The expected
keep/reject table lives in ``expected.json`` and is written by hand from the
construction below, not from the filter's output.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from carfield import geometry as geo

HERE = Path(__file__).parent
SIZE = 96
K = geo.Intrinsics(160.0, 160.0, 48.0, 40.0)
DIMS = {"length": 4.0, "height": 1.5, "width": 1.8}


def box3d(center, yaw=0.3, dims=DIMS):
    return {"center": list(center), "dims": dict(dims), "yaw": yaw}


def projected(b):
    box = geo.Box3D(b["center"], geo.CarDimensions(**b["dims"]), b["yaw"])
    p = geo.project_box3d(box, K)
    return [round(p.x_min, 3), round(p.y_min, 3), round(p.x_max, 3), round(p.y_max, 3)]


def mask_for(box2d, coverage=1.0):
    """Mask filling the left ``coverage`` fraction of box2d's pixel columns."""
    x0, y0, x1, y1 = box2d
    m = np.zeros((SIZE, SIZE), np.uint8)
    xa, xb = int(np.floor(x0)), int(np.ceil(x1))
    ya, yb = int(np.floor(y0)), int(np.ceil(y1))
    cols = round((xb - xa) * coverage)
    m[ya:yb, xa : xa + cols] = 255
    return m


def main():
    near = box3d((0.0, 1.0, 10.0))
    far = box3d((0.0, 1.0, 45.0))
    shifted = box3d((3.5, 1.0, 10.0))  # 3D box slides sideways, 2D box stays
    behind = box3d((0.0, 1.0, 1.0))
    conf = {"det2d": 0.9, "det3d": 0.9, "seg": 0.9}
    b_near, b_far = projected(near), projected(far)
    cases = [
        # id, box3d, box2d, mask coverage, confidences
        ("r01", near, b_near, 1.0, conf),
        ("r02", shifted, b_near, 1.0, conf),
        ("r03", near, b_near, 0.3, conf),
        ("r04", near, b_near, 1.0, {**conf, "det2d": 0.5}),
        ("r05", near, b_near, 1.0, {**conf, "seg": 0.6}),
        ("r06", far, b_far, 1.0, conf),
        ("r07", box3d((3.5, 1.0, 45.0)), b_far, 1.0, conf),
        ("r08", shifted, b_near, 0.3, conf),
        ("r09", near, b_near, 0.3, {**conf, "det3d": 0.2}),
        ("r10", near, b_near, 0.6, conf),
        ("r11", near, b_near, 1.0, {"det2d": 0.7, "det3d": 0.7, "seg": 0.7}),
        ("r12", behind, b_near, 1.0, conf),
    ]
    rng = np.random.default_rng(0)
    lines = []
    for rid, b3, b2, cov, c in cases:
        patch = (rng.uniform(0, 255, size=(SIZE, SIZE, 3))).astype(np.uint8)
        (HERE / "patches").mkdir(exist_ok=True)
        (HERE / "masks").mkdir(exist_ok=True)
        Image.fromarray(patch).save(HERE / "patches" / f"{rid}.png")
        Image.fromarray(mask_for(b2, cov)).save(HERE / "masks" / f"{rid}.png")
        rec = {
            "id": rid,
            "patch_path": f"patches/{rid}.png",
            "mask_path": f"masks/{rid}.png",
            "image_size": [SIZE, SIZE],
            "crop_origin": [0, 0],
            "intrinsics": {
                "focal_x": K.focal_x,
                "focal_y": K.focal_y,
                "principal_x": K.principal_x,
                "principal_y": K.principal_y,
            },
            "box2d": b2,
            "box3d": b3,
            "source": "KITTI-DET",
            "confidences": c,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    (HERE / "manifest.jsonl").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
