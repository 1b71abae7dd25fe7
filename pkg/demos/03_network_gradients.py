"""The permutation-invariant block and its hand-written backward pass.

Shows the max-pool invariance, then validates the analytic gradients of a
full model (centering stage + regression head) against central finite
differences, holding crop membership and resampling fixed.
"""
import numpy as np

from boxrefine import network as nw
from boxrefine.pipeline import CLASS_REGIONS, TrainingSample

rng = np.random.default_rng(3)

block = nw.init_block(3, (16, 32), (24,), 5, rng)
for arr in block.arrays():
    arr += rng.normal(scale=0.05, size=arr.shape)
points = rng.normal(size=(64, 3))
out, _ = nw.block_forward(points, block)
out_permuted, _ = nw.block_forward(points[rng.permutation(64)], block)
print("permutation invariant:", np.array_equal(out, out_permuted))

model = nw.build_model(
    "car", mechanisms=("centering",), point_widths=(8, 16), head_widths=(16,), seed=7
)
for arr in model.param_arrays():
    arr += rng.normal(scale=0.05, size=arr.shape)

cloud = rng.normal(scale=0.6, size=(48, 3)) + [0.08, -0.03, 0.4]
target = TrainingSample(
    points=cloud, location=np.array([0.08, -0.03, 0.02]), yaw=0.9,
    size=np.array([1.55, 1.52, 3.40]),
)
region = CLASS_REGIONS["car"]

pred, state = nw.refiner_forward(cloud, model, region, 32, np.random.default_rng(0))
plan = state.plan[0]
breakdown, d_head, d_stage = nw.multitask_loss(pred, target, model)
print(f"\nloss: {breakdown}")
grads = nw.backward_batch(state, d_head[None], [d[None] for d in d_stage])


def total_loss():
    p, _ = nw.refiner_forward(cloud, model, region, 32, plan=plan)
    return nw.multitask_loss(p, target, model)[0].total


worst = 0.0
params = list(model.param_arrays())
grad_arrays = list(grads.arrays())
for arr, grad in zip(params, grad_arrays):
    flat, gflat = arr.ravel(), grad.ravel()
    for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
        h, orig = 1e-4, flat[idx]
        flat[idx] = orig + h
        up = total_loss()
        flat[idx] = orig - h
        down = total_loss()
        flat[idx] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - gflat[idx]) / max(1e-7, abs(fd) + abs(gflat[idx])))

print(f"worst relative error, analytic vs finite differences: {worst:.2e}")
