"""Closed-form codecs between raw network outputs and geometric quantities.

Bounded quantities (translations, rotation angles, scales) use sigmoid
squashing so any finite raw value decodes strictly inside its open range.
Sizes use exponential residuals around per-class anchors. Rotation uses a
hybrid bin classification plus a normalized in-bin regression residual.

Every decode has an analytic derivative companion (``*_grad``) used by the
training backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# per-class anchor sizes (h, w, l) in meters
CLASS_ANCHORS: dict[str, tuple[float, float, float]] = {
    "car": (1.50, 1.57, 3.33),
    "pedestrian": (1.73, 0.60, 0.80),
    "cyclist": (1.73, 0.60, 1.76),
}


def sigmoid(t):
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_grad(t):
    s = sigmoid(t)
    return s * (1.0 - s)


# a hair under 1 keeps the decoded ranges open intervals even where the
# float64 sigmoid saturates to exactly 0 or 1
_UNIT_CAP = 1.0 - 1e-15


def squashed_unit(t):
    """2*(sigmoid(t) - 0.5), clipped strictly inside (-1, 1)."""
    return np.clip(2.0 * (sigmoid(t) - 0.5), -_UNIT_CAP, _UNIT_CAP)


@dataclass(frozen=True)
class TransformBounds:
    """Ranges for the spatial transform decoders.

    ``t_xyz`` are the translation/centering half-ranges (set equal to the
    distance bound the model is trained to correct), ``t_r`` the rotation
    half-range, ``t_s_xy``/``t_s_z`` the scale range bases.
    """

    t_xyz: tuple[float, float, float]
    t_r: float = np.pi / 4
    t_s_xy: float = 2.0
    t_s_z: float = 2.0

    def __post_init__(self):
        if not all(v > 0 for v in self.t_xyz):
            raise ValueError(f"translation bounds must be positive: {self.t_xyz}")
        if self.t_r <= 0 or self.t_s_xy <= 0 or self.t_s_z <= 0:
            raise ValueError("rotation/scale bounds must be positive")

    @classmethod
    def from_dist_bound(cls, dist_bound: float) -> "TransformBounds":
        return cls(t_xyz=(dist_bound, dist_bound, dist_bound))


@dataclass(frozen=True)
class RegressionBounds:
    """Half-ranges for the final location regression: half the transform range."""

    d_xyz: tuple[float, float, float]

    @classmethod
    def from_transform(cls, bounds: TransformBounds) -> "RegressionBounds":
        return cls(d_xyz=tuple(0.5 * t for t in bounds.t_xyz))


@dataclass(frozen=True)
class RotationBins:
    """Equal division of [0, pi) into n bins for the hybrid rotation codec."""

    n_bins: int = 12

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("need at least 2 rotation bins")

    @property
    def width(self) -> float:
        return np.pi / self.n_bins

    def center(self, index: int) -> float:
        return (index + 0.5) * self.width


def decode_translation(t, bounds: TransformBounds) -> np.ndarray:
    """Raw (t_x, t_y, t_z) -> offset in meters, strictly inside (-T, T)."""
    t = np.asarray(t, dtype=float)
    T = np.asarray(bounds.t_xyz, dtype=float)
    return squashed_unit(t) * T


def decode_translation_grad(t, bounds: TransformBounds) -> np.ndarray:
    T = np.asarray(bounds.t_xyz, dtype=float)
    return 2.0 * sigmoid_grad(np.asarray(t, dtype=float)) * T


def decode_rotation_angle(t_r: float, bounds: TransformBounds) -> float:
    """Raw rotation output -> clockwise angle in (-T_r, T_r) radians."""
    return float(squashed_unit(t_r) * bounds.t_r)


def decode_rotation_angle_grad(t_r: float, bounds: TransformBounds) -> float:
    return float(2.0 * sigmoid_grad(np.asarray(t_r, dtype=float)) * bounds.t_r)


def decode_scale(t, bounds: TransformBounds) -> tuple[float, float]:
    """Raw (t_s_xy, t_s_z) -> scale factors strictly inside (1/T_s, T_s)."""
    t = np.asarray(t, dtype=float)
    s_xy = bounds.t_s_xy ** float(squashed_unit(t[0]))
    s_z = bounds.t_s_z ** float(squashed_unit(t[1]))
    return float(s_xy), float(s_z)


def decode_scale_grad(t, bounds: TransformBounds) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    s_xy, s_z = decode_scale(t, bounds)
    return np.array(
        [
            s_xy * np.log(bounds.t_s_xy) * 2.0 * sigmoid_grad(t[0]),
            s_z * np.log(bounds.t_s_z) * 2.0 * sigmoid_grad(t[1]),
        ]
    )


def decode_location(t, bounds: RegressionBounds) -> np.ndarray:
    """Raw (t_x, t_y, t_z) -> location offset strictly inside (-d, d)."""
    t = np.asarray(t, dtype=float)
    d = np.asarray(bounds.d_xyz, dtype=float)
    return squashed_unit(t) * d


def decode_location_grad(t, bounds: RegressionBounds) -> np.ndarray:
    d = np.asarray(bounds.d_xyz, dtype=float)
    return 2.0 * sigmoid_grad(np.asarray(t, dtype=float)) * d


def encode_location(offset, bounds: RegressionBounds, clamp: float = 0.999) -> np.ndarray:
    """Inverse of decode_location; targets at or past the bound are clamped
    to ``clamp * d`` first since the sigmoid cannot represent them."""
    offset = np.asarray(offset, dtype=float)
    d = np.asarray(bounds.d_xyz, dtype=float)
    u = np.clip(offset / d, -clamp, clamp)
    p = 0.5 * (u + 1.0)
    return np.log(p / (1.0 - p))


def encode_rotation(yaw: float, bins: RotationBins) -> tuple[int, float]:
    """Yaw -> (bin index, residual in [-1, 1] of half a bin width).

    The heading is reduced modulo pi: the rotation head covers 180 degrees
    only, so yaw and yaw + pi encode identically.
    """
    theta = float(np.mod(yaw, np.pi))
    index = min(int(theta / bins.width), bins.n_bins - 1)
    residual = (theta - bins.center(index)) / (bins.width / 2.0)
    return index, float(residual)


def decode_rotation(rot_cls, rot_reg, bins: RotationBins) -> float:
    """Logits + per-bin residuals -> yaw in [0, pi).

    Takes the argmax bin (ties broken by lowest index) and offsets its
    center by the normalized residual.
    """
    rot_cls = np.asarray(rot_cls, dtype=float)
    rot_reg = np.asarray(rot_reg, dtype=float)
    if len(rot_cls) != bins.n_bins or len(rot_reg) != bins.n_bins:
        raise ValueError("rotation vectors must have one entry per bin")
    index = int(np.argmax(rot_cls))
    theta = bins.center(index) + rot_reg[index] * (bins.width / 2.0)
    return float(np.mod(theta, np.pi))


def decode_size(t, anchor) -> np.ndarray:
    """Raw (t_h, t_w, t_l) -> (h, w, l) = anchor * exp(t), always positive."""
    return np.asarray(anchor, dtype=float) * np.exp(np.asarray(t, dtype=float))


def decode_size_grad(t, anchor) -> np.ndarray:
    return decode_size(t, anchor)


def encode_size(size, anchor) -> np.ndarray:
    """Inverse of decode_size: t = ln(size / anchor)."""
    return np.log(np.asarray(size, dtype=float) / np.asarray(anchor, dtype=float))
