"""Synthetic LiDAR scenes and a simulated localization module.

Objects are hollow cuboid shells: points are sampled on the surfaces a
sensor at the origin can see (facing sides and the top), with Gaussian
sensor noise and a point budget that decays with distance. Ground-plane
and clutter points are mixed in. A simulated localizer then emits noisy
center detections with confidence scores that decrease with the injected
noise, which stands in for an upstream detection system at desk scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CLASS_ANCHORS
from .geometry import Box3D, Detection, rotate_z
from .kitti import Calibration, GroundTruth, Scene, write_scene

# fraction of the object height (above the ground) that returns no side hits:
# wheel wells and body skirts are rarely sampled by a vehicle-mounted sensor
SIDE_CLEARANCE = 0.1

FOCAL_PX = 721.0  # nominal focal length used to synthesize image-box heights


@dataclass(frozen=True)
class SceneSpec:
    n_objects: int = 5
    obj_class: str = "car"
    extent: float = 30.0  # objects placed with |x|, |y| <= extent
    points_per_object: int = 220  # budget at 10 m, decays as 1/d^2
    ground_density: float = 0.05  # points per square meter
    clutter: float = 30.0  # expected stray points per scene
    sensor_height: float = 1.7
    size_jitter: float = 0.15

    def __post_init__(self):
        if self.n_objects < 0 or self.extent <= 0:
            raise ValueError("invalid scene spec")
        if self.obj_class not in CLASS_ANCHORS:
            raise ValueError(f"unknown class {self.obj_class!r}")


def _sample_box_surface(box: Box3D, n: int, sensor: np.ndarray, rng) -> np.ndarray:
    """Points on the visible shell of the box, with 2 cm Gaussian noise."""
    h, w, l = box.size
    # candidate faces in the box frame: 4 sides + top
    # each: (local center, in-plane axes u/v with half-extents, outward normal)
    faces = [
        (np.array([w / 2, 0, 0]), ("y", l / 2), ("z", h / 2), np.array([1.0, 0, 0])),
        (np.array([-w / 2, 0, 0]), ("y", l / 2), ("z", h / 2), np.array([-1.0, 0, 0])),
        (np.array([0, l / 2, 0]), ("x", w / 2), ("z", h / 2), np.array([0, 1.0, 0])),
        (np.array([0, -l / 2, 0]), ("x", w / 2), ("z", h / 2), np.array([0, -1.0, 0])),
        (np.array([0, 0, h / 2]), ("x", w / 2), ("y", l / 2), np.array([0, 0, 1.0])),
    ]
    axis_index = {"x": 0, "y": 1, "z": 2}
    visible = []
    weights = []
    for center_local, (ua, ue), (va, ve), normal_local in faces:
        center_world = rotate_z(center_local, box.yaw) + box.center
        normal_world = rotate_z(normal_local, box.yaw)
        if np.dot(sensor - center_world, normal_world) <= 0:
            continue
        visible.append((center_local, (ua, ue), (va, ve)))
        weights.append(4 * ue * ve)
    if not visible:  # degenerate placement; fall back to the top face
        visible = [faces[4][:3]]
        weights = [1.0]
    weights = np.asarray(weights) / np.sum(weights)
    counts = rng.multinomial(n, weights)
    pts_local = []
    for (center_local, (ua, ue), (va, ve)), count in zip(visible, counts):
        if count == 0:
            continue
        p = np.tile(center_local, (count, 1))
        p[:, axis_index[ua]] += rng.uniform(-ue, ue, size=count)
        lo = -ve + SIDE_CLEARANCE * h if va == "z" else -ve
        p[:, axis_index[va]] += rng.uniform(lo, ve, size=count)
        pts_local.append(p)
    pts = np.concatenate(pts_local) if pts_local else np.empty((0, 3))
    pts = rotate_z(pts, box.yaw) + box.center
    return pts + rng.normal(scale=0.02, size=pts.shape)


def generate_scene(spec: SceneSpec, rng: np.random.Generator, scene_id: str = "000000") -> Scene:
    """Deterministic given (spec, rng state). Raises if the requested number
    of non-overlapping objects cannot be placed."""
    anchor = np.asarray(CLASS_ANCHORS[spec.obj_class])
    sensor = np.array([0.0, 0.0, spec.sensor_height])

    boxes: list[Box3D] = []
    attempts = 0
    max_attempts = 200 * max(spec.n_objects, 1)
    while len(boxes) < spec.n_objects:
        if attempts >= max_attempts:
            raise RuntimeError(
                f"could not place {spec.n_objects} non-overlapping objects "
                f"in extent {spec.extent} after {max_attempts} attempts"
            )
        attempts += 1
        h, w, l = anchor * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter, size=3)
        xy = rng.uniform(-spec.extent, spec.extent, size=2)
        if np.hypot(*xy) < 3.0:  # keep a hole around the sensor
            continue
        box = Box3D(center=[xy[0], xy[1], h / 2], size=(h, w, l), yaw=rng.uniform(-np.pi, np.pi))
        radius = np.hypot(w, l) / 2
        ok = all(
            np.hypot(*(box.center[:2] - other.center[:2])) > radius + np.hypot(other.w, other.l) / 2
            for other in boxes
        )
        if ok:
            boxes.append(box)

    chunks = []
    n_ground = int(round(spec.ground_density * (2 * spec.extent) ** 2))
    if n_ground:
        ground = np.column_stack(
            [
                rng.uniform(-spec.extent, spec.extent, size=n_ground),
                rng.uniform(-spec.extent, spec.extent, size=n_ground),
                rng.normal(scale=0.02, size=n_ground),
            ]
        )
        chunks.append(ground)

    gts = []
    for box in boxes:
        dist = float(np.linalg.norm(box.center - sensor))
        budget = int(spec.points_per_object * min((10.0 / max(dist, 1.0)) ** 2, 4.0))
        budget = max(20, budget)
        chunks.append(_sample_box_surface(box, budget, sensor, rng))
        gts.append(
            GroundTruth(
                box=box,
                obj_class=spec.obj_class,
                occlusion=0,
                truncation=0.0,
                bbox_height=FOCAL_PX * box.h / dist,
            )
        )

    n_clutter = int(rng.poisson(spec.clutter))
    if n_clutter:
        clutter = np.column_stack(
            [
                rng.uniform(-spec.extent, spec.extent, size=n_clutter),
                rng.uniform(-spec.extent, spec.extent, size=n_clutter),
                rng.uniform(0.0, 3.0, size=n_clutter),
            ]
        )
        chunks.append(clutter)

    points = np.concatenate(chunks) if chunks else np.empty((0, 3))
    return Scene(scene_id=scene_id, points=points, ground_truths=gts)


@dataclass(frozen=True)
class LocalizerSpec:
    """Noise model standing in for an upstream localization module."""

    noise: str = "uniform"  # "uniform" cube or isotropic "gaussian"
    noise_scale: float = 0.15  # half-width, or sigma for gaussian
    fn_rate: float = 0.0
    fp_rate: float = 0.0  # expected false positives per scene
    score_jitter: float = 0.05

    def __post_init__(self):
        if self.noise not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if not (0 <= self.fn_rate <= 1) or self.fp_rate < 0 or self.noise_scale < 0:
            raise ValueError("invalid localizer spec")


def simulate_localizer(scene: Scene, spec: LocalizerSpec, rng: np.random.Generator) -> list[Detection]:
    """One detection per kept ground truth at center + noise, plus false
    positives in free space; scores fall off with the injected noise."""
    detections = []
    for gt in scene.ground_truths:
        if rng.uniform() < spec.fn_rate:
            continue
        if spec.noise == "uniform":
            noise = rng.uniform(-spec.noise_scale, spec.noise_scale, size=3)
        else:
            noise = rng.normal(scale=spec.noise_scale, size=3)
        if spec.noise_scale > 0:
            base = 1.0 - np.linalg.norm(noise) / (2.0 * spec.noise_scale)
        else:
            base = 1.0
        score = float(np.clip(np.clip(base, 0.0, 1.0) + rng.normal(scale=spec.score_jitter), 0.0, 1.0))
        detections.append(Detection(location=gt.box.center + noise, score=score))

    n_fp = int(rng.poisson(spec.fp_rate))
    if n_fp and len(scene.points):
        lo = scene.points.min(axis=0)
        hi = scene.points.max(axis=0)
        for _ in range(n_fp):
            for _ in range(50):
                loc = np.array(
                    [rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), rng.uniform(0.3, 1.2)]
                )
                clear = all(
                    np.linalg.norm(loc[:2] - gt.box.center[:2]) > 2.0
                    for gt in scene.ground_truths
                )
                if clear:
                    break
            score = float(np.clip(rng.normal(scale=spec.score_jitter), 0.0, 1.0))
            detections.append(Detection(location=loc, score=score))
    return detections


def write_synthetic_dataset(
    root,
    n_scenes: int,
    spec: SceneSpec,
    seed: int = 0,
    calib: Calibration | None = None,
) -> list[Scene]:
    """A KITTI-layout directory of generated scenes; bitwise deterministic
    given (spec, seed)."""
    root = Path(root)
    scenes = []
    for i in range(n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        scene = generate_scene(spec, rng, scene_id=f"{i:06d}")
        write_scene(root, scene, calib)
        scenes.append(scene)
    return scenes
