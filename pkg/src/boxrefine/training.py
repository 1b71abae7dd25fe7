"""Training loop: object bank, per-iteration sample synthesis, optimization.

Each iteration derives its own RNG stream from (seed, iteration), so a run
resumed from a checkpoint continues bitwise identically to an uninterrupted
one. Training arithmetic is float32 end to end, matching the checkpoint
payload precision.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .geometry import Box3D
from .kitti import Scene
from .network import (
    BoxRefiner,
    EmptyCloudError,
    LossBreakdown,
    OptimizerState,
    backward_batch,
    forward_batch,
    init_optimizer,
    multitask_loss_batch,
    optimizer_step,
)
from .pipeline import AugmentConfig, SamplingRegion, augment_centered_crop, crop_cylinder


@dataclass
class ObjectBank:
    """Per-object crops (translated to put the GT center at the origin)."""

    crops: list[np.ndarray]
    boxes: list[Box3D]

    def __len__(self):
        return len(self.crops)


def build_object_bank(scenes: list[Scene], obj_class: str, region: SamplingRegion) -> ObjectBank:
    crops, boxes = [], []
    for scene in scenes:
        for gt in scene.ground_truths:
            if gt.obj_class != obj_class:
                continue
            crop = crop_cylinder(scene.points, gt.box.center, region)
            if len(crop) == 0:
                continue
            crops.append(crop - gt.box.center)
            boxes.append(gt.box)
    return ObjectBank(crops=crops, boxes=boxes)


def loss_log_header(has_centering: bool) -> str:
    cols = ["iter", "loc", "rot_cls", "rot_reg", "size"]
    if has_centering:
        cols.append("loc_center")
    cols.append("total")
    return " ".join(cols)


def loss_log_line(iteration: int, bd: LossBreakdown) -> str:
    parts = [str(iteration), f"{bd.loc:.6f}", f"{bd.rot_cls:.6f}", f"{bd.rot_reg:.6f}", f"{bd.size:.6f}"]
    if bd.loc_center is not None:
        parts.append(f"{bd.loc_center:.6f}")
    parts.append(f"{bd.total:.6f}")
    return " ".join(parts)


def _draw_batch(bank: ObjectBank, cfg: AugmentConfig, batch_size: int, rng):
    idx = rng.integers(0, len(bank), size=batch_size)
    samples = [augment_centered_crop(bank.crops[i], bank.boxes[i], cfg, rng) for i in idx]
    return samples


def train_model(
    model: BoxRefiner,
    bank: ObjectBank,
    cfg: AugmentConfig,
    iterations: int,
    batch_size: int = 64,
    lr: float = 5e-4,
    seed: int = 0,
    optimizer: str = "adam",
    opt_state: OptimizerState | None = None,
    start_iteration: int = 0,
    log_stream=None,
    checkpoint_path=None,
    ckpt_every: int = 0,
    progress_every: int = 0,
    fixed_batch: bool = False,
):
    """Run (iterations - start_iteration) optimizer steps.

    Returns (model, opt_state, history) where history is a list of
    (iteration, LossBreakdown). Samples that lose every point inside a
    transform stage are dropped from their batch. ``fixed_batch`` freezes
    the first batch and repeats it every iteration (overfit sanity mode).
    """
    if len(bank) == 0:
        raise ValueError("object bank is empty; nothing to train on")
    if opt_state is None:
        opt_state = init_optimizer(model, kind=optimizer, lr=lr)
    params = list(model.param_arrays())
    history = []
    if log_stream is not None and start_iteration == 0:
        log_stream.write(loss_log_header(model.has_centering) + "\n")

    frozen = None
    if fixed_batch:
        frozen = _draw_batch(bank, cfg, batch_size, np.random.default_rng(np.random.SeedSequence((seed, 0))))

    for it in range(start_iteration, iterations):
        rng = np.random.default_rng(np.random.SeedSequence((seed, it)))
        samples = frozen if frozen is not None else _draw_batch(bank, cfg, batch_size, rng)
        bd = None
        for _ in range(50):
            clouds = np.stack([s.points for s in samples]).astype(np.float32)
            try:
                pred, state = forward_batch(clouds, model, cfg.region, cfg.n_points, rng)
            except EmptyCloudError as err:
                if err.sample is None or len(samples) <= 1:
                    samples = _draw_batch(bank, cfg, batch_size, rng)
                else:
                    samples = [s for i, s in enumerate(samples) if i != err.sample]
                continue
            break
        else:
            raise RuntimeError(f"iteration {it}: could not assemble a viable batch")

        bd, d_head, d_stage = multitask_loss_batch(
            pred,
            np.stack([s.location for s in samples]),
            np.array([s.yaw for s in samples]),
            np.stack([s.size for s in samples]),
            model,
        )
        grads = backward_batch(state, d_head, d_stage)
        optimizer_step(params, list(grads.arrays()), opt_state)

        history.append((it, bd))
        if log_stream is not None:
            log_stream.write(loss_log_line(it, bd) + "\n")
        if progress_every and (it + 1) % progress_every == 0:
            print(f"iter {it + 1}/{iterations} total {bd.total:.4f}", file=sys.stderr)
        if checkpoint_path and ckpt_every and (it + 1) % ckpt_every == 0:
            save_checkpoint(checkpoint_path, model, seed=seed, iteration=it + 1, opt_state=opt_state)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, seed=seed, iteration=iterations, opt_state=opt_state)
    return model, opt_state, history
