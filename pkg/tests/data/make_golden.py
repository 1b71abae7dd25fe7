"""One-off generator for the label-conversion golden fixture.

Builds a realistic calibration and label file, converts the labels with a
standalone homogeneous-matrix derivation (independent of the library code
path) and freezes the expected sensor-frame boxes as JSON. Run from the
repo root: python tests/data/make_golden.py
"""
import json
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def main():
    # rectification: small rotation; sensor-to-camera: nominal axis swap
    # perturbed by small angles plus a translation, KITTI-like magnitudes
    r0 = rot_z(0.004) @ rot_y(-0.002) @ rot_x(0.0015)
    nominal = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    tr_rot = rot_z(0.003) @ rot_y(0.006) @ rot_x(-0.004) @ nominal
    tr_t = np.array([-0.002, -0.06, -0.27])

    calib_lines = [
        "P2: " + " ".join("0.0" for _ in range(12)),  # unused by the loaders
        "R0_rect: " + " ".join(f"{v:.12e}" for v in r0.ravel()),
        "Tr_velo_to_cam: " + " ".join(f"{v:.12e}" for v in np.hstack([tr_rot, tr_t[:, None]]).ravel()),
    ]
    (HERE / "golden_calib.txt").write_text("\n".join(calib_lines) + "\n")

    # type trunc occ alpha x1 y1 x2 y2 h w l x y z ry
    label_rows = [
        ("Car", 0.00, 0, -1.55, 400.0, 160.0, 500.0, 220.0, 1.48, 1.60, 3.69, 2.10, 1.62, 18.40, -1.62),
        ("Pedestrian", 0.10, 1, 0.40, 700.0, 150.0, 730.0, 230.0, 1.80, 0.55, 0.95, -4.20, 1.55, 11.30, 0.35),
        ("DontCare", -1, -1, -10, 500.0, 150.0, 520.0, 170.0, -1, -1, -1, -1000, -1000, -1000, -10),
        ("Van", 0.00, 0, 1.00, 300.0, 170.0, 380.0, 210.0, 2.10, 1.90, 5.20, -7.50, 1.70, 25.00, 1.05),
        ("Cyclist", 0.00, 2, -2.00, 610.0, 165.0, 640.0, 215.0, 1.70, 0.60, 1.80, 5.90, 1.58, 14.70, -2.10),
    ]
    lines = []
    for row in label_rows:
        lines.append(" ".join(str(v) for v in row))
    (HERE / "golden_label.txt").write_text("\n".join(lines) + "\n")

    # independent conversion: full 4x4 homogeneous chain, inverted numerically
    cam_from_velo = np.eye(4)
    cam_from_velo[:3, :3] = r0 @ tr_rot
    cam_from_velo[:3, 3] = r0 @ tr_t
    velo_from_cam = np.linalg.inv(cam_from_velo)

    expected = []
    for row in label_rows:
        cls = row[0].lower()
        if cls not in ("car", "pedestrian", "cyclist"):
            continue
        trunc, occ = float(row[1]), int(row[2])
        x1, y1, x2, y2 = (float(v) for v in row[4:8])
        h, w, l = (float(v) for v in row[8:11])
        x, y, z = (float(v) for v in row[11:14])
        ry = float(row[14])
        bottom = velo_from_cam @ np.array([x, y, z, 1.0])
        center = bottom[:3] + np.array([0.0, 0.0, h / 2.0])
        heading_cam = np.array([np.cos(ry), 0.0, -np.sin(ry), 0.0])
        heading = (velo_from_cam @ heading_cam)[:3]
        yaw = float(np.arctan2(heading[0], heading[1]))
        yaw = float(np.mod(yaw + np.pi, 2 * np.pi) - np.pi)
        expected.append(
            {
                "class": cls,
                "center": [float(v) for v in center],
                "size": [h, w, l],
                "yaw": yaw,
                "occlusion": occ,
                "truncation": trunc,
                "bbox_height": y2 - y1,
            }
        )
    (HERE / "golden_boxes.json").write_text(json.dumps(expected, indent=2) + "\n")
    print(f"wrote {len(expected)} expected boxes")


if __name__ == "__main__":
    main()
