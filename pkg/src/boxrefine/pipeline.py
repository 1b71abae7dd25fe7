"""Proposal-conditioned cropping, training-sample augmentation, refinement.

A sampling region is a rotation-invariant cylinder around a proposal,
slightly larger than the class it serves so localization error is
absorbed. Training samples simulate a noisy proposal around a ground-truth
object: the object is re-sized, its heading jittered, and the crop is
placed so the object center sits at a random offset within the distance
bound the model must learn to correct.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, Detection, rotate_z, wrap_angle
from .network import BoxRefiner, EmptyCloudError, refiner_forward


@dataclass(frozen=True)
class SamplingRegion:
    """Cylinder crop: radius in meters, z band relative to the proposal's z."""

    radius: float
    z_min: float = -0.5
    z_max: float = 2.5

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.z_min >= self.z_max:
            raise ValueError("z_min must be below z_max")


CLASS_REGIONS: dict[str, SamplingRegion] = {
    "car": SamplingRegion(2.4, -0.5, 2.5),
    "pedestrian": SamplingRegion(0.35, -0.5, 2.5),
    "cyclist": SamplingRegion(0.8, -0.5, 2.5),
}


def crop_cylinder(points: np.ndarray, center, region: SamplingRegion) -> np.ndarray:
    """Points with horizontal distance <= radius and z - center.z inside the
    band. Order preserved; may return an empty array."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    center = np.asarray(center, dtype=float).reshape(3)
    dx = points[:, 0] - center[0]
    dy = points[:, 1] - center[1]
    dz = points[:, 2] - center[2]
    keep = (dx * dx + dy * dy <= region.radius**2) & (dz >= region.z_min) & (dz <= region.z_max)
    return points[keep]


def resample_fixed(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly n points: random subset when too many, originals plus
    with-replacement draws when too few."""
    points = np.asarray(points)
    count = len(points)
    if count == 0:
        raise ValueError("cannot resample an empty point cloud")
    if count == n:
        return points
    if count > n:
        return points[np.sort(rng.choice(count, size=n, replace=False))]
    extra = rng.integers(0, count, size=n - count)
    return np.concatenate([points, points[extra]])


@dataclass(frozen=True)
class AugmentConfig:
    """Training-sample generation parameters for one class."""

    dist_bound: float = 0.15
    scale_low: float = 0.9
    scale_high: float = 1.1
    yaw_jitter: float = np.pi / 8
    n_points: int = 256
    region: SamplingRegion = field(default_factory=lambda: CLASS_REGIONS["car"])

    def __post_init__(self):
        if self.dist_bound <= 0:
            raise ValueError("dist_bound must be positive")


@dataclass
class TrainingSample:
    """A fixed-size cloud in the simulated proposal frame plus its targets."""

    points: np.ndarray  # (n_points, 3)
    location: np.ndarray  # object center in the proposal frame, (3,)
    yaw: float
    size: np.ndarray  # (h, w, l)

    @property
    def center(self) -> np.ndarray:
        # the intermediate centering supervision target equals the location
        return self.location


def augment_centered_crop(
    crop_centered: np.ndarray, gt: Box3D, cfg: AugmentConfig, rng: np.random.Generator
) -> TrainingSample:
    """Augment a crop already translated so the ground-truth center is the
    origin. Draw order is fixed: 3 scales, yaw jitter, 3 offsets."""
    if len(crop_centered) == 0:
        raise ValueError("empty crop around the ground-truth center")
    scales = rng.uniform(cfg.scale_low, cfg.scale_high, size=3)
    r_z = rng.uniform(-cfg.yaw_jitter, cfg.yaw_jitter)
    offset = rng.uniform(-cfg.dist_bound, cfg.dist_bound, size=3)

    pts = rotate_z(crop_centered, -gt.yaw)  # align the object length with y
    pts = pts * scales
    pts = rotate_z(pts, gt.yaw + r_z)
    pts = pts + offset

    # per-axis scales act in the aligned frame: x scales w, y scales l, z scales h
    size = np.array([gt.h * scales[2], gt.w * scales[0], gt.l * scales[1]])
    pts = resample_fixed(pts, cfg.n_points, rng)
    return TrainingSample(
        points=pts,
        location=offset,
        yaw=wrap_angle(gt.yaw + r_z),
        size=size,
    )


def make_training_sample(
    scene_points: np.ndarray, gt: Box3D, cfg: AugmentConfig, rng: np.random.Generator
) -> TrainingSample:
    """Crop around the ground truth, then simulate a noisy proposal.

    Steps: crop the class region at the GT center; move the center to the
    origin; rotate by -yaw to align the object along y; scale each axis
    independently; rotate back to the original heading plus a small jitter;
    translate so the object center lands at a random offset within the
    distance bound. The offset is the regression target.
    """
    crop = crop_cylinder(scene_points, gt.center, cfg.region)
    if len(crop) == 0:
        raise ValueError(f"no points inside the sampling region at {gt.center}")
    return augment_centered_crop(crop - gt.center, gt, cfg, rng)


@dataclass
class RefineResult:
    """Batch refinement output: detections in input order plus flags."""

    detections: list[Detection]
    refined: list[bool]


def refine_detections(
    detections: list[Detection],
    scene_points: np.ndarray,
    model: BoxRefiner,
    region: SamplingRegion,
    n_points: int = 256,
    seed: int = 0,
) -> RefineResult:
    """Refine each detection independently; no non-maximum suppression.

    Detections whose crop is empty (or that lose all points inside a
    transform stage) pass through unrefined with box absent. Count, order
    and scores are preserved.
    """
    out: list[Detection] = []
    flags: list[bool] = []
    for i, det in enumerate(detections):
        crop = crop_cylinder(scene_points, det.location, region)
        if len(crop) == 0:
            out.append(Detection(location=det.location.copy(), score=det.score, box=None))
            flags.append(False)
            continue
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        try:
            pred, _ = refiner_forward(crop - det.location, model, region, n_points, rng)
        except EmptyCloudError:
            out.append(Detection(location=det.location.copy(), score=det.score, box=None))
            flags.append(False)
            continue
        box = Box3D(
            center=pred.box.center + det.location,
            size=pred.box.size,
            yaw=pred.box.yaw,
        )
        out.append(Detection(location=det.location.copy(), score=det.score, box=box))
        flags.append(True)
    return RefineResult(detections=out, refined=flags)
