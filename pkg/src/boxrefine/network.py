"""Permutation-invariant point network with exact reverse-mode gradients.

The building block is a shared per-point MLP followed by a feature-wise max
pool and a small head MLP; every layer is ReLU except the final head layer.
A refinement model is an ordered list of spatial-transform stages (each a
block predicting a translation/centering offset, a rotation angle or a pair
of scale factors, which is then applied to the point cloud before
re-cropping and resampling) and a final block regressing the box.

All forward passes are written batched, shape (B, N, 3); the single-sample
API wraps B = 1. Backward passes are hand-derived and validated against
central finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import (
    RegressionBounds,
    squashed_unit,
    RotationBins,
    TransformBounds,
    CLASS_ANCHORS,
    decode_location,
    decode_rotation_angle,
    decode_scale,
    decode_size,
    decode_translation,
    sigmoid,
)
from .geometry import Box3D, rotate_z, wrap_angle

MECHANISMS = ("translation", "centering", "rotation", "scaling")
MECHANISM_DIMS = {"translation": 3, "centering": 3, "rotation": 1, "scaling": 2}

DEFAULT_POINT_WIDTHS = (64, 128, 256)
DEFAULT_HEAD_WIDTHS = (128,)


class EmptyCloudError(ValueError):
    """A transform stage (or the initial crop) left zero points to process.

    ``stage`` is the index of the offending stage, or None for an empty
    input cloud; ``sample`` is the batch index.
    """

    def __init__(self, message, stage=None, sample=None):
        super().__init__(message)
        self.stage = stage
        self.sample = sample


@dataclass
class BlockParams:
    """Weights of one building block: per-point layers, then head layers."""

    point_layers: list[tuple[np.ndarray, np.ndarray]]
    head_layers: list[tuple[np.ndarray, np.ndarray]]

    def arrays(self):
        for w, b in self.point_layers:
            yield w
            yield b
        for w, b in self.head_layers:
            yield w
            yield b

    @property
    def out_dim(self) -> int:
        return self.head_layers[-1][0].shape[1]


def init_block(
    in_dim: int,
    point_widths,
    head_widths,
    out_dim: int,
    rng: np.random.Generator,
    dtype=np.float64,
) -> BlockParams:
    """Glorot-uniform weights, zero biases."""

    def layer(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
        b = np.zeros(n_out, dtype=dtype)
        return w, b

    point_layers = []
    d = in_dim
    for width in point_widths:
        point_layers.append(layer(d, width))
        d = width
    head_layers = []
    for width in head_widths:
        head_layers.append(layer(d, width))
        d = width
    head_layers.append(layer(d, out_dim))
    return BlockParams(point_layers, head_layers)


def zero_grads(params: BlockParams) -> BlockParams:
    return BlockParams(
        [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.point_layers],
        [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.head_layers],
    )


# ---------------------------------------------------------------------------
# building block forward / backward
# ---------------------------------------------------------------------------

def block_forward_batch(points: np.ndarray, params: BlockParams):
    """points (B, N, d_in) -> (output (B, d_out), cache)."""
    points = np.asarray(points)
    if points.ndim != 3 or points.shape[1] == 0:
        raise EmptyCloudError("cannot max-pool an empty point cloud")
    batch, n, _ = points.shape
    a = points
    point_pre = []
    for w, b in params.point_layers:
        # one flat GEMM instead of a batched loop
        z = (a.reshape(batch * n, -1) @ w).reshape(batch, n, -1) + b
        point_pre.append((a, z))
        a = np.maximum(z, 0.0)
    argmax = np.argmax(a, axis=1)  # (B, d)
    pooled = np.take_along_axis(a, argmax[:, None, :], axis=1)[:, 0, :]
    h = pooled
    head_pre = []
    n_head = len(params.head_layers)
    for i, (w, b) in enumerate(params.head_layers):
        z = h @ w + b
        head_pre.append((h, z))
        h = z if i == n_head - 1 else np.maximum(z, 0.0)
    cache = {
        "params": params,
        "point_pre": point_pre,
        "argmax": argmax,
        "n_points": points.shape[1],
        "head_pre": head_pre,
    }
    return h, cache


def block_backward_batch(cache, d_out: np.ndarray):
    """Exact gradients of block_forward_batch.

    Returns (BlockParams-shaped gradients summed over the batch,
    d_points (B, N, d_in)). The max pool routes gradient only to each
    feature's argmax point.
    """
    params: BlockParams = cache["params"]
    grads = zero_grads(params)
    n_head = len(params.head_layers)
    dh = np.asarray(d_out)
    for i in range(n_head - 1, -1, -1):
        h_in, z = cache["head_pre"][i]
        dz = dh if i == n_head - 1 else dh * (z > 0)
        w, _ = params.head_layers[i]
        gw, gb = grads.head_layers[i]
        gw += h_in.reshape(-1, h_in.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
        gb += dz.sum(axis=0)
        dh = dz @ w.T
    # un-pool: scatter each feature's gradient to its argmax point
    argmax = cache["argmax"]
    n = cache["n_points"]
    batch = dh.shape[0]
    da = np.zeros((batch, n, dh.shape[1]), dtype=dh.dtype)
    np.put_along_axis(da, argmax[:, None, :], dh[:, None, :], axis=1)
    for i in range(len(params.point_layers) - 1, -1, -1):
        a_in, z = cache["point_pre"][i]
        da *= z > 0
        w, _ = params.point_layers[i]
        gw, gb = grads.point_layers[i]
        dz_flat = da.reshape(batch * n, -1)
        gw += a_in.reshape(batch * n, -1).T @ dz_flat
        gb += dz_flat.sum(axis=0)
        da = (dz_flat @ w.T).reshape(batch, n, -1)
    return grads, da


def block_forward(points: np.ndarray, params: BlockParams):
    """Single-cloud wrapper: (N, d_in) -> (output (d_out,), cache)."""
    points = np.asarray(points)
    if points.ndim != 2:
        raise ValueError(f"expected (N, d) cloud, got shape {points.shape}")
    out, cache = block_forward_batch(points[None], params)
    return out[0], cache


def block_backward(cache, d_out: np.ndarray):
    grads, d_points = block_backward_batch(cache, np.asarray(d_out)[None])
    return grads, d_points[0]


# ---------------------------------------------------------------------------
# refinement model
# ---------------------------------------------------------------------------

@dataclass
class BoxRefiner:
    """Transform stages plus a box-regression head, with their codecs."""

    obj_class: str
    stages: list[tuple[str, BlockParams]]
    head: BlockParams
    bounds: TransformBounds
    bins: RotationBins
    anchor: tuple[float, float, float]

    @property
    def reg_bounds(self) -> RegressionBounds:
        return RegressionBounds.from_transform(self.bounds)

    @property
    def mechanisms(self) -> list[str]:
        return [kind for kind, _ in self.stages]

    @property
    def has_centering(self) -> bool:
        return any(kind == "centering" for kind, _ in self.stages)

    def param_arrays(self):
        for _, block in self.stages:
            yield from block.arrays()
        yield from self.head.arrays()


def build_model(
    obj_class: str = "car",
    mechanisms=(),
    dist_bound: float = 0.15,
    n_bins: int = 12,
    point_widths=DEFAULT_POINT_WIDTHS,
    head_widths=DEFAULT_HEAD_WIDTHS,
    seed: int = 0,
    dtype=np.float64,
    anchor=None,
) -> BoxRefiner:
    if obj_class not in CLASS_ANCHORS and anchor is None:
        raise ValueError(f"unknown class {obj_class!r} and no anchor given")
    for kind in mechanisms:
        if kind not in MECHANISMS:
            raise ValueError(f"unknown mechanism {kind!r}, expected one of {MECHANISMS}")
    rng = np.random.default_rng(seed)
    bins = RotationBins(n_bins)
    stages = [
        (kind, init_block(3, point_widths, head_widths, MECHANISM_DIMS[kind], rng, dtype))
        for kind in mechanisms
    ]
    head = init_block(3, point_widths, head_widths, 6 + 2 * n_bins, rng, dtype)
    return BoxRefiner(
        obj_class=obj_class,
        stages=stages,
        head=head,
        bounds=TransformBounds.from_dist_bound(dist_bound),
        bins=bins,
        anchor=tuple(anchor) if anchor is not None else CLASS_ANCHORS[obj_class],
    )


def decode_stage(kind: str, raw: np.ndarray, bounds: TransformBounds) -> np.ndarray:
    if kind in ("translation", "centering"):
        return decode_translation(raw, bounds)
    if kind == "rotation":
        return np.array([decode_rotation_angle(raw[0], bounds)])
    if kind == "scaling":
        return np.array(decode_scale(raw, bounds))
    raise ValueError(kind)


def _decode_stage_batch(kind, raw, bounds):
    """raw (B, dim) -> decoded transform parameters (B, dim)."""
    if kind in ("translation", "centering"):
        return squashed_unit(raw) * np.asarray(bounds.t_xyz)
    if kind == "rotation":
        return squashed_unit(raw) * bounds.t_r
    if kind == "scaling":
        expo = squashed_unit(raw)
        return np.stack(
            [bounds.t_s_xy ** expo[:, 0], bounds.t_s_z ** expo[:, 1]], axis=1
        )
    raise ValueError(kind)


def _decode_stage_grad_batch(kind, raw, theta, bounds):
    """d(decoded)/d(raw), elementwise, shape (B, dim)."""
    s = sigmoid(raw)
    sg = s * (1.0 - s)
    if kind in ("translation", "centering"):
        return 2.0 * sg * np.asarray(bounds.t_xyz)
    if kind == "rotation":
        return 2.0 * sg * bounds.t_r
    if kind == "scaling":
        logs = np.array([np.log(bounds.t_s_xy), np.log(bounds.t_s_z)])
        return theta * logs * 2.0 * sg
    raise ValueError(kind)


def _apply_stage_batch(kind, theta, points):
    """Apply a stage transform to (B, N, 3) points.

    Translation/centering subtracts the offset, rotation rotates by the
    negated angle, scaling divides BEV coordinates by scale_xy and z by
    scale_z.
    """
    if kind in ("translation", "centering"):
        return points - theta[:, None, :]
    if kind == "rotation":
        r = theta[:, 0]
        c, s = np.cos(r)[:, None], np.sin(r)[:, None]
        out = points.copy()
        out[..., 0] = points[..., 0] * c - points[..., 1] * s
        out[..., 1] = points[..., 0] * s + points[..., 1] * c
        return out
    if kind == "scaling":
        out = points.copy()
        out[..., 0] /= theta[:, 0][:, None]
        out[..., 1] /= theta[:, 0][:, None]
        out[..., 2] /= theta[:, 1][:, None]
        return out
    raise ValueError(kind)


def _apply_stage_backward(kind, theta, points_in, points_out, d_out):
    """Gradients of _apply_stage_batch.

    Returns (d_theta (B, dim), d_points_in (B, N, 3)).
    """
    if kind in ("translation", "centering"):
        return -d_out.sum(axis=1), d_out
    if kind == "rotation":
        # out = ccw rotation by r: x' = x c - y s, y' = x s + y c
        # dx'/dr = -y', dy'/dr = x'
        d_r = (
            d_out[..., 0] * (-points_out[..., 1]) + d_out[..., 1] * points_out[..., 0]
        ).sum(axis=1)
        r = theta[:, 0]
        c, s = np.cos(r)[:, None], np.sin(r)[:, None]
        d_in = d_out.copy()
        d_in[..., 0] = d_out[..., 0] * c + d_out[..., 1] * s
        d_in[..., 1] = -d_out[..., 0] * s + d_out[..., 1] * c
        return d_r[:, None], d_in
    if kind == "scaling":
        s_xy = theta[:, 0][:, None]
        s_z = theta[:, 1][:, None]
        d_sxy = (
            d_out[..., 0] * (-points_in[..., 0] / s_xy**2)
            + d_out[..., 1] * (-points_in[..., 1] / s_xy**2)
        ).sum(axis=1)
        d_sz = (d_out[..., 2] * (-points_in[..., 2] / s_z**2)).sum(axis=1)
        d_in = d_out.copy()
        d_in[..., 0] /= s_xy
        d_in[..., 1] /= s_xy
        d_in[..., 2] /= s_z
        return np.stack([d_sxy, d_sz], axis=1), d_in
    raise ValueError(kind)


def _crop_indices_origin(points, region):
    """Indices of points inside the sampling region centered at the origin."""
    keep = (
        (points[:, 0] ** 2 + points[:, 1] ** 2 <= region.radius**2)
        & (points[:, 2] >= region.z_min)
        & (points[:, 2] <= region.z_max)
    )
    return np.flatnonzero(keep)


def _resample_indices(count, n, rng):
    if count == n:
        return np.arange(count)
    if count > n:
        return np.sort(rng.choice(count, size=n, replace=False))
    extra = rng.integers(0, count, size=n - count)
    return np.concatenate([np.arange(count), extra])


@dataclass
class Prediction:
    """Decoded model output for one proposal."""

    box: Box3D  # in the input (proposal) frame
    location: np.ndarray  # decoded location offset, final transformed frame
    yaw: float  # decoded heading in [0, pi), final frame
    size: np.ndarray
    raw_head: np.ndarray
    stage_kinds: list[str]
    stage_raw: list[np.ndarray]
    stage_params: list[np.ndarray]


@dataclass
class BatchPrediction:
    boxes: list[Box3D]
    location: np.ndarray  # (B, 3)
    yaw: np.ndarray  # (B,)
    size: np.ndarray  # (B, 3)
    raw_head: np.ndarray  # (B, 6 + 2 n_bins)
    stage_kinds: list[str]
    stage_raw: list[np.ndarray]  # per stage (B, dim)
    stage_params: list[np.ndarray]  # per stage (B, dim)


@dataclass
class ForwardState:
    """Everything the backward pass and plan reuse need."""

    model: BoxRefiner
    stage_caches: list
    stage_inputs: list  # per stage: (B, n, 3) block input
    stage_outputs: list  # per stage: (B, n, 3) transformed cloud
    stage_select: list  # per stage: (B, n) indices into the transformed cloud
    stage_raw: list  # per stage: (B, dim) raw block outputs
    stage_theta: list  # per stage: (B, dim) decoded transform parameters
    head_cache: dict
    plan: list  # per sample: {"init": idx, "stages": [idx, ...]}


def forward_batch(
    clouds,
    model: BoxRefiner,
    region,
    n_points: int,
    rng: np.random.Generator | None = None,
    plans=None,
):
    """Run the full model on a batch of proposal-frame clouds.

    ``clouds`` is a list of (M_i, 3) arrays or one (B, n, 3) array. Each
    cloud is resampled to ``n_points``, passed through the transform stages
    (block, decode, apply, re-crop around the origin, resample) and the
    regression head. ``plans`` replays the crop/resample index choices of a
    previous call, which keeps point membership fixed while parameters vary.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    dtype = next(iter(model.head.arrays())).dtype
    if isinstance(clouds, np.ndarray) and clouds.ndim == 3:
        clouds = list(clouds)
    batch = len(clouds)
    new_plan = [{"init": None, "stages": []} for _ in range(batch)]
    rows = []
    for b, cloud in enumerate(clouds):
        cloud = np.asarray(cloud, dtype=dtype)
        if plans is not None:
            idx = plans[b]["init"]
        else:
            if len(cloud) == 0:
                raise EmptyCloudError(f"sample {b}: empty input cloud", sample=b)
            idx = _resample_indices(len(cloud), n_points, rng)
        new_plan[b]["init"] = idx
        rows.append(cloud[idx])
    points = np.stack(rows)

    stage_caches, stage_inputs, stage_outputs, stage_select = [], [], [], []
    stage_raw, stage_params = [], []
    for k, (kind, block) in enumerate(model.stages):
        raw, cache = block_forward_batch(points, block)
        theta = _decode_stage_batch(kind, raw, model.bounds)
        transformed = _apply_stage_batch(kind, theta, points)
        select = np.empty((batch, n_points), dtype=np.int64)
        for b in range(batch):
            if plans is not None:
                sel = plans[b]["stages"][k]
            else:
                keep = _crop_indices_origin(transformed[b], region)
                if len(keep) == 0:
                    raise EmptyCloudError(
                        f"stage {k} ({kind}) left no points in the sampling "
                        f"region for sample {b}",
                        stage=k,
                        sample=b,
                    )
                sel = keep[_resample_indices(len(keep), n_points, rng)]
            select[b] = sel
            new_plan[b]["stages"].append(sel)
        stage_caches.append(cache)
        stage_inputs.append(points)
        stage_outputs.append(transformed)
        stage_select.append(select)
        stage_raw.append(raw)
        stage_params.append(theta)
        points = np.take_along_axis(transformed, select[:, :, None], axis=1)

    raw_head, head_cache = block_forward_batch(points, model.head)
    loc = decode_location(raw_head[:, 0:3], model.reg_bounds)
    n_bins = model.bins.n_bins
    best = np.argmax(raw_head[:, 3 : 3 + n_bins], axis=1)
    residual = raw_head[np.arange(batch), 3 + n_bins + best]
    yaw = np.mod((best + 0.5) * model.bins.width + residual * (model.bins.width / 2.0), np.pi)
    size = decode_size(raw_head[:, 3 + 2 * n_bins :], model.anchor)

    boxes = []
    for b in range(batch):
        center = loc[b].astype(float)
        box_yaw = float(yaw[b])
        h, w, l = (float(v) for v in size[b])
        # undo the stage transforms in reverse order
        for kind, theta in zip(
            reversed([kd for kd, _ in model.stages]), reversed([t[b] for t in stage_params])
        ):
            if kind in ("translation", "centering"):
                center = center + theta
            elif kind == "rotation":
                center = rotate_z(center, float(theta[0]))
                box_yaw += float(theta[0])
            elif kind == "scaling":
                center = center * np.array([theta[0], theta[0], theta[1]])
                w *= float(theta[0])
                l *= float(theta[0])
                h *= float(theta[1])
        boxes.append(Box3D(center=center, size=(h, w, l), yaw=wrap_angle(box_yaw)))

    prediction = BatchPrediction(
        boxes=boxes,
        location=loc,
        yaw=yaw,
        size=size,
        raw_head=raw_head,
        stage_kinds=[kind for kind, _ in model.stages],
        stage_raw=stage_raw,
        stage_params=stage_params,
    )
    state = ForwardState(
        model=model,
        stage_caches=stage_caches,
        stage_inputs=stage_inputs,
        stage_outputs=stage_outputs,
        stage_select=stage_select,
        stage_raw=stage_raw,
        stage_theta=stage_params,
        head_cache=head_cache,
        plan=new_plan,
    )
    return prediction, state


def refiner_forward(points, model, region, n_points, rng=None, plan=None):
    """Single-proposal wrapper around forward_batch."""
    plans = [plan] if plan is not None else None
    batch_pred, state = forward_batch([points], model, region, n_points, rng, plans)
    prediction = Prediction(
        box=batch_pred.boxes[0],
        location=batch_pred.location[0],
        yaw=float(batch_pred.yaw[0]),
        size=batch_pred.size[0],
        raw_head=batch_pred.raw_head[0],
        stage_kinds=batch_pred.stage_kinds,
        stage_raw=[r[0] for r in batch_pred.stage_raw],
        stage_params=[t[0] for t in batch_pred.stage_params],
    )
    return prediction, state


@dataclass
class ModelGrads:
    stages: list[BlockParams]
    head: BlockParams

    def arrays(self):
        for block in self.stages:
            yield from block.arrays()
        yield from self.head.arrays()


def backward_batch(state: ForwardState, d_raw_head, d_stage_params=None) -> ModelGrads:
    """Reverse-mode gradients of the full model.

    ``d_raw_head`` is the loss gradient w.r.t. the head's raw outputs,
    shape (B, out). ``d_stage_params`` optionally adds loss gradients
    w.r.t. each stage's decoded transform parameters (B, dim), e.g. the
    centering supervision and the transformed-target terms. Crop membership
    and resample choices are treated as fixed. Returns parameter gradients
    summed over the batch.
    """
    model = state.model
    head_grads, d_points = block_backward_batch(state.head_cache, np.asarray(d_raw_head))
    stage_grads: list[BlockParams] = [None] * len(model.stages)  # type: ignore[list-item]
    for k in range(len(model.stages) - 1, -1, -1):
        kind, _ = model.stages[k]
        select = state.stage_select[k]
        transformed = state.stage_outputs[k]
        batch, n = select.shape
        # scatter-add the resampled gradient back onto the transformed cloud
        d_transformed = np.zeros_like(transformed)
        flat = d_transformed.reshape(-1, 3)
        flat_idx = (np.arange(batch)[:, None] * transformed.shape[1] + select).ravel()
        np.add.at(flat, flat_idx, d_points.reshape(batch * n, 3))

        theta = state.stage_theta[k]
        d_theta, d_in = _apply_stage_backward(
            kind, theta, state.stage_inputs[k], transformed, d_transformed
        )
        if d_stage_params is not None and d_stage_params[k] is not None:
            d_theta = d_theta + np.asarray(d_stage_params[k])
        d_raw = d_theta * _decode_stage_grad_batch(
            kind, state.stage_raw[k], theta, model.bounds
        )
        grads_k, d_block_in = block_backward_batch(state.stage_caches[k], d_raw)
        stage_grads[k] = grads_k
        d_points = d_in + d_block_in
    return ModelGrads(stages=stage_grads, head=head_grads)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def huber(residual, delta: float = 1.0):
    """Quadratic near zero, linear in the tails; once-differentiable at |r|=delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.abs(np.asarray(residual, dtype=float))
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def huber_grad(residual, delta: float = 1.0):
    r = np.asarray(residual, dtype=float)
    return np.clip(r, -delta, delta)


@dataclass
class LossBreakdown:
    """Per-term training loss. loc_center is present only for centering models."""

    loc: float
    rot_cls: float
    rot_reg: float
    size: float
    loc_center: float | None = None

    @property
    def total(self) -> float:
        t = self.loc + self.rot_cls + self.rot_reg + self.size
        if self.loc_center is not None:
            t += self.loc_center
        return t


def _chain_targets(stage_kinds, stage_theta, loc, yaw, size):
    """Carry the target box through the stage transforms.

    Returns per-stage input-side snapshots plus the final-frame target;
    each snapshot is (loc (B,3), yaw (B,), size (B,3)).
    """
    snapshots = []
    loc, yaw, size = loc.copy(), yaw.copy(), size.copy()
    for kind, theta in zip(stage_kinds, stage_theta):
        snapshots.append((loc, yaw, size))
        if kind in ("translation", "centering"):
            loc = loc - theta
        elif kind == "rotation":
            r = theta[:, 0]
            c, s = np.cos(r), np.sin(r)
            loc = np.stack(
                [loc[:, 0] * c - loc[:, 1] * s, loc[:, 0] * s + loc[:, 1] * c, loc[:, 2]],
                axis=1,
            )
            yaw = yaw - r
        elif kind == "scaling":
            loc = loc / np.stack([theta[:, 0], theta[:, 0], theta[:, 1]], axis=1)
            size = size / np.stack([theta[:, 1], theta[:, 0], theta[:, 0]], axis=1)
        else:
            raise ValueError(kind)
    return snapshots, (loc, yaw, size)


def multitask_loss_batch(
    prediction: BatchPrediction,
    target_loc,
    target_yaw,
    target_size,
    model: BoxRefiner,
    delta: float = 1.0,
):
    """Multi-task loss and its gradients, averaged over the batch.

    The target box is carried through the predicted stage transforms so the
    head is supervised in its own (transformed) frame; each centering stage
    is additionally supervised to predict the object center in that stage's
    input frame. All residuals are dimensionless: location offsets divided
    by their half-range, sizes compared in log space, rotation residuals in
    half-bin-width units.

    Returns (LossBreakdown, d_raw_head (B, out), d_stage_params list).
    """
    target_loc = np.asarray(target_loc, dtype=float).reshape(-1, 3)
    target_yaw = np.asarray(target_yaw, dtype=float).reshape(-1)
    target_size = np.asarray(target_size, dtype=float).reshape(-1, 3)
    batch = target_loc.shape[0]
    raw_head = prediction.raw_head
    n_bins = model.bins.n_bins
    d = np.asarray(model.reg_bounds.d_xyz)
    T = np.asarray(model.bounds.t_xyz)
    anchor = np.asarray(model.anchor)
    inv_b = 1.0 / batch

    snapshots, (tc, tyaw, tsize) = _chain_targets(
        prediction.stage_kinds, prediction.stage_params, target_loc, target_yaw, target_size
    )

    # location: compare sigmoid-decoded offsets, normalized by the half-range
    raw_loc = raw_head[:, 0:3]
    dec_loc = prediction.location
    clamp = 0.999 * d
    tc_clamped = np.clip(tc, -clamp, clamp)
    clamp_mask = (np.abs(tc) < clamp).astype(float)
    r_loc = (dec_loc - tc_clamped) / d
    loss_loc = huber(r_loc, delta).sum() * inv_b
    g_loc = huber_grad(r_loc, delta) * inv_b
    d_raw_loc = (g_loc / d) * (2.0 * sigmoid(raw_loc) * (1.0 - sigmoid(raw_loc)) * d)
    d_tc = -(g_loc / d) * clamp_mask

    # rotation: cross-entropy over bins plus Huber on the target bin's residual
    width = model.bins.width
    theta_t = np.mod(tyaw, np.pi)
    t_bin = np.minimum((theta_t / width).astype(int), n_bins - 1)
    t_res = (theta_t - (t_bin + 0.5) * width) / (width / 2.0)
    logits = raw_head[:, 3 : 3 + n_bins]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss_cls = (log_z - shifted[np.arange(batch), t_bin]).sum() * inv_b
    softmax = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    d_logits = softmax * inv_b
    d_logits[np.arange(batch), t_bin] -= inv_b

    reg = raw_head[:, 3 + n_bins : 3 + 2 * n_bins]
    r_reg = reg[np.arange(batch), t_bin] - t_res
    loss_reg = huber(r_reg, delta).sum() * inv_b
    g_reg = huber_grad(r_reg, delta) * inv_b
    d_reg = np.zeros_like(reg)
    d_reg[np.arange(batch), t_bin] = g_reg
    d_tyaw = -g_reg / (width / 2.0)

    # size: compare in log-residual (encoded) space
    raw_size = raw_head[:, 3 + 2 * n_bins :]
    t_size_enc = np.log(tsize / anchor)
    r_size = raw_size - t_size_enc
    loss_size = huber(r_size, delta).sum() * inv_b
    g_size = huber_grad(r_size, delta) * inv_b
    d_raw_size = g_size
    d_tsize = -g_size / tsize

    d_raw_head = np.concatenate([d_raw_loc, d_logits, d_reg, d_raw_size], axis=1)

    # walk the target chain backwards, accumulating stage-parameter gradients
    d_stage = [None] * len(prediction.stage_kinds)
    loss_center = 0.0
    for k in range(len(prediction.stage_kinds) - 1, -1, -1):
        kind = prediction.stage_kinds[k]
        theta = prediction.stage_params[k]
        loc_in, _, size_in = snapshots[k]
        if kind in ("translation", "centering"):
            d_theta = -d_tc.copy()
        elif kind == "rotation":
            r = theta[:, 0]
            c, s = np.cos(r), np.sin(r)
            x_out = loc_in[:, 0] * c - loc_in[:, 1] * s
            y_out = loc_in[:, 0] * s + loc_in[:, 1] * c
            d_r = d_tc[:, 0] * (-y_out) + d_tc[:, 1] * x_out - d_tyaw
            d_theta = d_r[:, None]
            d_tc = np.stack(
                [
                    d_tc[:, 0] * c + d_tc[:, 1] * s,
                    -d_tc[:, 0] * s + d_tc[:, 1] * c,
                    d_tc[:, 2],
                ],
                axis=1,
            )
        elif kind == "scaling":
            s_xy, s_z = theta[:, 0], theta[:, 1]
            d_sxy = (
                d_tc[:, 0] * (-loc_in[:, 0] / s_xy**2)
                + d_tc[:, 1] * (-loc_in[:, 1] / s_xy**2)
                + d_tsize[:, 1] * (-size_in[:, 1] / s_xy**2)
                + d_tsize[:, 2] * (-size_in[:, 2] / s_xy**2)
            )
            d_sz = d_tc[:, 2] * (-loc_in[:, 2] / s_z**2) + d_tsize[:, 0] * (
                -size_in[:, 0] / s_z**2
            )
            d_theta = np.stack([d_sxy, d_sz], axis=1)
            d_tc = d_tc / np.stack([s_xy, s_xy, s_z], axis=1)
            d_tsize = d_tsize / np.stack([s_z, s_xy, s_xy], axis=1)
        else:
            raise ValueError(kind)
        if kind == "centering":
            r_c = (theta - loc_in) / T
            loss_center += huber(r_c, delta).sum() * inv_b
            g_c = huber_grad(r_c, delta) * inv_b / T
            d_theta = d_theta + g_c
            d_tc = d_tc - g_c
        d_stage[k] = d_theta

    breakdown = LossBreakdown(
        loc=float(loss_loc),
        rot_cls=float(loss_cls),
        rot_reg=float(loss_reg),
        size=float(loss_size),
        loc_center=float(loss_center) if model.has_centering else None,
    )
    # keep the backward pass in the model's dtype
    dtype = raw_head.dtype
    d_raw_head = d_raw_head.astype(dtype)
    d_stage = [g.astype(dtype) if g is not None else None for g in d_stage]
    return breakdown, d_raw_head, d_stage


def multitask_loss(prediction: Prediction, target, model: BoxRefiner, delta: float = 1.0):
    """Single-sample loss: target has .location (3,), .yaw and .size (3,)."""
    batch_pred = BatchPrediction(
        boxes=[prediction.box],
        location=prediction.location[None],
        yaw=np.array([prediction.yaw]),
        size=prediction.size[None],
        raw_head=prediction.raw_head[None],
        stage_kinds=prediction.stage_kinds,
        stage_raw=[r[None] for r in prediction.stage_raw],
        stage_params=[t[None] for t in prediction.stage_params],
    )
    breakdown, d_raw_head, d_stage = multitask_loss_batch(
        batch_pred,
        np.asarray(target.location)[None],
        np.array([target.yaw]),
        np.asarray(target.size)[None],
        model,
        delta,
    )
    return breakdown, d_raw_head[0], [g[0] if g is not None else None for g in d_stage]


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam (default) or plain SGD state over a flat list of parameter arrays."""

    kind: str = "adam"
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_optimizer(model: BoxRefiner, kind: str = "adam", lr: float = 5e-4) -> OptimizerState:
    if kind not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {kind!r}")
    params = list(model.param_arrays())
    return OptimizerState(
        kind=kind,
        lr=lr,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def optimizer_step(params, grads, state: OptimizerState):
    """Update parameters in place; returns (params, state)."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("parameter/gradient count mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    state.step += 1
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= (state.lr * g).astype(p.dtype)
        return params, state
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += ((1.0 - state.beta1) * g).astype(m.dtype)
        v *= state.beta2
        v += ((1.0 - state.beta2) * g * g).astype(v.dtype)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= update.astype(p.dtype)
    return params, state
