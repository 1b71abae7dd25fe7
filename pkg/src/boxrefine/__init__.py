"""boxrefine: 3D bounding-box refinement from raw LiDAR point clouds.

Given coarse object location proposals, crops class-sized cylinders of
points around each one, runs them through a small permutation-invariant
network with learned spatial-transform stages, and regresses precise
oriented 3D boxes. Ships with synthetic-scene generation, KITTI-format
ingestion, training (from-scratch reverse-mode gradients) and detection
metrics.
"""
from .codec import (
    CLASS_ANCHORS,
    RegressionBounds,
    RotationBins,
    TransformBounds,
)
from .geometry import Box3D, Detection, box_corners, iou_3d, iou_bev, rotate_z
from .kitti import Calibration, GroundTruth, Scene
from .network import (
    BlockParams,
    BoxRefiner,
    LossBreakdown,
    OptimizerState,
    block_backward,
    block_forward,
    build_model,
    huber,
    multitask_loss,
    optimizer_step,
    refiner_forward,
)
from .pipeline import (
    CLASS_REGIONS,
    AugmentConfig,
    SamplingRegion,
    TrainingSample,
    crop_cylinder,
    make_training_sample,
    refine_detections,
    resample_fixed,
)
from .synthetic import LocalizerSpec, SceneSpec, generate_scene, simulate_localizer

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "BlockParams",
    "Box3D",
    "BoxRefiner",
    "CLASS_ANCHORS",
    "CLASS_REGIONS",
    "Calibration",
    "Detection",
    "GroundTruth",
    "LocalizerSpec",
    "LossBreakdown",
    "OptimizerState",
    "RegressionBounds",
    "RotationBins",
    "SamplingRegion",
    "Scene",
    "SceneSpec",
    "TrainingSample",
    "TransformBounds",
    "block_backward",
    "block_forward",
    "box_corners",
    "build_model",
    "crop_cylinder",
    "generate_scene",
    "huber",
    "iou_3d",
    "iou_bev",
    "make_training_sample",
    "multitask_loss",
    "optimizer_step",
    "refine_detections",
    "refiner_forward",
    "resample_fixed",
    "rotate_z",
    "simulate_localizer",
]
