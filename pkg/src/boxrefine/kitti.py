"""KITTI-format ingestion and emission.

Point clouds are little-endian float32 (x, y, z, reflectance) quadruplets.
Labels and predictions use the 15-field text layout (plus a trailing score
for predictions); locations there are camera-frame bottom centers, which we
convert to sensor-frame volumetric centers through the calibration (inverse
rigid transform composed with inverse rectification, then a +h/2 vertical
shift). A dataset directory holds velodyne/, label/ and calib/ subfolders,
one file per scene id.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box3D, Detection, wrap_angle

KNOWN_CLASSES = ("car", "pedestrian", "cyclist")


class FormatError(ValueError):
    """Malformed or truncated input file."""


@dataclass(frozen=True)
class Calibration:
    """Rectification rotation and the sensor-to-camera rigid transform."""

    rect: np.ndarray  # (3, 3)
    velo_to_cam: np.ndarray  # (3, 4)

    def __post_init__(self):
        rect = np.asarray(self.rect, dtype=float).reshape(3, 3)
        tr = np.asarray(self.velo_to_cam, dtype=float).reshape(3, 4)
        for name, rot in (("rectification", rect), ("velo_to_cam rotation", tr[:, :3])):
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-3):
                raise FormatError(f"{name} matrix is not orthonormal within 1e-3")
        object.__setattr__(self, "rect", rect)
        object.__setattr__(self, "velo_to_cam", tr)

    @classmethod
    def nominal(cls) -> "Calibration":
        """The ideal axis mapping: camera x-right/y-down/z-forward against
        sensor x-forward/y-left/z-up, no offset."""
        m = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        return cls(rect=np.eye(3), velo_to_cam=np.hstack([m, np.zeros((3, 1))]))

    def rect_from_velo(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return (points @ self.velo_to_cam[:, :3].T + self.velo_to_cam[:, 3]) @ self.rect.T

    def velo_from_rect(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        unrect = points @ np.linalg.inv(self.rect).T
        return (unrect - self.velo_to_cam[:, 3]) @ np.linalg.inv(self.velo_to_cam[:, :3]).T

    def velo_dir_from_rect(self, direction: np.ndarray) -> np.ndarray:
        d = np.asarray(direction, dtype=float) @ np.linalg.inv(self.rect).T
        return d @ np.linalg.inv(self.velo_to_cam[:, :3]).T

    def rect_dir_from_velo(self, direction: np.ndarray) -> np.ndarray:
        return np.asarray(direction, dtype=float) @ self.velo_to_cam[:, :3].T @ self.rect.T


@dataclass
class GroundTruth:
    box: Box3D
    obj_class: str
    occlusion: int = 0
    truncation: float = 0.0
    bbox_height: float | None = None  # image-plane box height in pixels


@dataclass
class Scene:
    scene_id: str
    points: np.ndarray  # (N, 3)
    ground_truths: list[GroundTruth]


# ---------------------------------------------------------------------------
# velodyne binaries
# ---------------------------------------------------------------------------

def read_velodyne(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IOError(f"cannot read {path}: {exc}") from exc
    if len(data) % 16 != 0:
        raise FormatError(f"{path}: length {len(data)} is not a multiple of 16 bytes")
    if not data:
        return np.empty((0, 3))
    return np.frombuffer(data, "<f4").reshape(-1, 4)[:, :3].astype(float)


def write_velodyne(path, points: np.ndarray, reflectance: float = 0.0) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    quads = np.column_stack([points, np.full(len(points), reflectance)])
    Path(path).write_bytes(np.ascontiguousarray(quads, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# calibration text
# ---------------------------------------------------------------------------

def read_calib(path) -> Calibration:
    values: dict[str, np.ndarray] = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise FormatError(f"{path}:{line_no}: expected 'key: values' line")
        key, _, rest = line.partition(":")
        try:
            values[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise FormatError(f"{path}:{line_no}: bad float ({exc})") from exc
    for key in ("R0_rect", "Tr_velo_to_cam"):
        if key not in values:
            raise FormatError(f"{path}: missing {key}")
    if values["R0_rect"].size != 9 or values["Tr_velo_to_cam"].size != 12:
        raise FormatError(f"{path}: R0_rect needs 9 values, Tr_velo_to_cam needs 12")
    return Calibration(
        rect=values["R0_rect"].reshape(3, 3),
        velo_to_cam=values["Tr_velo_to_cam"].reshape(3, 4),
    )


def write_calib(path, calib: Calibration) -> None:
    lines = [
        "R0_rect: " + " ".join(f"{v:.12e}" for v in calib.rect.ravel()),
        "Tr_velo_to_cam: " + " ".join(f"{v:.12e}" for v in calib.velo_to_cam.ravel()),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# label / prediction text
# ---------------------------------------------------------------------------

def box_from_label(h, w, l, x, y, z, rotation_y, calib: Calibration) -> Box3D:
    """Camera-frame bottom center + rotation_y -> sensor-frame box."""
    bottom = calib.velo_from_rect(np.array([x, y, z]))
    center = bottom + np.array([0.0, 0.0, h / 2.0])
    heading = calib.velo_dir_from_rect(np.array([np.cos(rotation_y), 0.0, -np.sin(rotation_y)]))
    yaw = np.arctan2(heading[0], heading[1])
    return Box3D(center=center, size=(h, w, l), yaw=wrap_angle(yaw))


def label_from_box(box: Box3D, calib: Calibration):
    """Sensor-frame box -> (h, w, l, x, y, z, rotation_y) label fields."""
    bottom = box.center - np.array([0.0, 0.0, box.h / 2.0])
    cam = calib.rect_from_velo(bottom)
    heading = calib.rect_dir_from_velo(np.array([np.sin(box.yaw), np.cos(box.yaw), 0.0]))
    rotation_y = float(np.arctan2(-heading[2], heading[0]))
    return box.h, box.w, box.l, cam[0], cam[1], cam[2], rotation_y


def _parse_object_line(parts, path, line_no, calib):
    try:
        truncation = float(parts[1])
        occlusion = int(float(parts[2]))
        bbox = [float(v) for v in parts[4:8]]
        h, w, l = (float(v) for v in parts[8:11])
        x, y, z = (float(v) for v in parts[11:14])
        rotation_y = float(parts[14])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}:{line_no}: malformed object line ({exc})") from exc
    box = box_from_label(h, w, l, x, y, z, rotation_y, calib)
    return GroundTruth(
        box=box,
        obj_class=parts[0].lower(),
        occlusion=occlusion,
        truncation=truncation,
        bbox_height=bbox[3] - bbox[1],
    )


def read_labels(path, calib: Calibration) -> list[GroundTruth]:
    """Ground truths for the known classes; DontCare and others are skipped."""
    out = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 15:
            raise FormatError(f"{path}:{line_no}: expected 15 fields, got {len(parts)}")
        if parts[0].lower() not in KNOWN_CLASSES:
            continue
        out.append(_parse_object_line(parts, path, line_no, calib))
    return out


def _format_object_line(obj_class: str, box: Box3D, calib: Calibration,
                        truncation=0.0, occlusion=0, bbox=None, score=None) -> str:
    h, w, l, x, y, z, rotation_y = label_from_box(box, calib)
    alpha = rotation_y - np.arctan2(x, z)
    if bbox is None:
        bbox = (0.0, 0.0, 50.0, 50.0)
    fields = [
        obj_class.capitalize(),
        f"{truncation:.2f}",
        str(int(occlusion)),
        f"{alpha:.6f}",
        *(f"{v:.6f}" for v in bbox),
        *(f"{v:.6f}" for v in (h, w, l, x, y, z, rotation_y)),
    ]
    if score is not None:
        fields.append(f"{score:.6f}")
    return " ".join(fields)


def write_labels(path, ground_truths: list[GroundTruth], calib: Calibration) -> None:
    lines = []
    for gt in ground_truths:
        bbox_h = gt.bbox_height if gt.bbox_height is not None else 50.0
        lines.append(
            _format_object_line(
                gt.obj_class, gt.box, calib,
                truncation=gt.truncation, occlusion=gt.occlusion,
                bbox=(500.0, 150.0, 550.0, 150.0 + bbox_h),
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_predictions(path, calib: Calibration) -> list[Detection]:
    """KITTI result format: label layout plus a trailing confidence score."""
    out = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 16:
            raise FormatError(
                f"{path}:{line_no}: expected 16 fields (15 label fields + score), "
                f"got {len(parts)}"
            )
        gt = _parse_object_line(parts[:15], path, line_no, calib)
        try:
            score = float(parts[15])
        except ValueError as exc:
            raise FormatError(f"{path}:{line_no}: bad score ({exc})") from exc
        out.append(Detection(location=gt.box.center, score=score, box=gt.box))
    return out


def write_predictions(path, detections: list[Detection], calib: Calibration,
                      obj_class: str) -> None:
    """Write detections that carry boxes; write-then-read is identity up to
    the 6-decimal float formatting."""
    lines = []
    for det in detections:
        if det.box is None:
            raise ValueError("cannot write a detection without a box")
        lines.append(_format_object_line(obj_class, det.box, calib, score=det.score))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def scene_ids(root) -> list[str]:
    velo = Path(root) / "velodyne"
    if not velo.is_dir():
        raise IOError(f"{root}: no velodyne/ directory")
    return sorted(p.stem for p in velo.glob("*.bin"))


def load_scene(root, scene_id: str) -> Scene:
    root = Path(root)
    calib = read_calib(root / "calib" / f"{scene_id}.txt")
    points = read_velodyne(root / "velodyne" / f"{scene_id}.bin")
    label_path = root / "label" / f"{scene_id}.txt"
    gts = read_labels(label_path, calib) if label_path.exists() else []
    return Scene(scene_id=scene_id, points=points, ground_truths=gts)


def load_dataset(root) -> list[Scene]:
    return [load_scene(root, sid) for sid in scene_ids(root)]


def write_scene(root, scene: Scene, calib: Calibration | None = None) -> None:
    root = Path(root)
    calib = calib or Calibration.nominal()
    for sub in ("velodyne", "label", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_velodyne(root / "velodyne" / f"{scene.scene_id}.bin", scene.points)
    write_labels(root / "label" / f"{scene.scene_id}.txt", scene.ground_truths, calib)
    write_calib(root / "calib" / f"{scene.scene_id}.txt", calib)
