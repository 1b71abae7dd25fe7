"""The closed-form codecs between raw network outputs and box quantities.

Every bounded quantity decodes through a sigmoid so any finite raw value
stays strictly inside its range; sizes decode as exponential residuals
around class anchors; rotation uses bins over 180 degrees plus a
normalized in-bin residual.
"""
import numpy as np

from boxrefine import CLASS_ANCHORS, RotationBins, TransformBounds, RegressionBounds
from boxrefine import codec

bounds = TransformBounds.from_dist_bound(0.15)
reg = RegressionBounds.from_transform(bounds)
bins = RotationBins(12)

print("raw -> translation offset (range +-0.15 m):")
for t in (-5.0, -1.0, 0.0, 1.0, 5.0):
    print(f"  t={t:+.1f}  offset={codec.decode_translation([t, 0, 0], bounds)[0]:+.4f} m")

print("\nraw -> scale factor (range [1/2, 2]):")
for t in (-5.0, 0.0, 5.0):
    s_xy, _ = codec.decode_scale([t, 0.0], bounds)
    print(f"  t={t:+.1f}  scale={s_xy:.4f}")

print("\nrotation codec (12 bins over 180 deg):")
for yaw in (0.05, 1.0, 2.5):
    index, residual = codec.encode_rotation(yaw, bins)
    logits = np.zeros(12)
    logits[index] = 10.0
    reg_vec = np.zeros(12)
    reg_vec[index] = residual
    back = codec.decode_rotation(logits, reg_vec, bins)
    print(f"  yaw={yaw:.3f} -> bin {index:2d}, residual {residual:+.3f} -> decoded {back:.3f}")

print("\nsize codec around the car anchor:")
anchor = CLASS_ANCHORS["car"]
for t_l in (-0.2, 0.0, np.log(2.0)):
    size = codec.decode_size([0.0, 0.0, t_l], anchor)
    print(f"  t_l={t_l:+.3f} -> length {size[2]:.2f} m")
