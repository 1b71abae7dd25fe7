import numpy as np
import pytest

from boxrefine.geometry import Box3D, box_corners, rotate_z


def monte_carlo_iou(a: Box3D, b: Box3D, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """Volume-overlap oracle: uniform samples in the union's bounding box,
    membership tested in each box's own corner frame."""
    rng = np.random.default_rng(seed)
    corners = np.vstack([box_corners(a), box_corners(b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))

    def inside(box):
        local = rotate_z(pts - box.center, -box.yaw)
        return (
            (np.abs(local[:, 0]) <= box.w / 2)
            & (np.abs(local[:, 1]) <= box.l / 2)
            & (np.abs(local[:, 2]) <= box.h / 2)
        )

    in_a = inside(a)
    in_b = inside(b)
    n_union = int((in_a | in_b).sum())
    if n_union == 0:
        return 0.0
    return int((in_a & in_b).sum()) / n_union


def random_box(rng, center_scale=2.0) -> Box3D:
    return Box3D(
        center=rng.uniform(-center_scale, center_scale, size=3),
        size=tuple(rng.uniform(0.5, 3.0, size=3)),
        yaw=rng.uniform(-np.pi, np.pi),
    )


def random_overlapping_pair(rng):
    a = random_box(rng)
    b = Box3D(
        center=a.center + rng.uniform(-1.0, 1.0, size=3),
        size=tuple(rng.uniform(0.5, 3.0, size=3)),
        yaw=rng.uniform(-np.pi, np.pi),
    )
    return a, b


class ScriptedRng:
    """Stands in for a Generator, returning scripted uniform/integers draws."""

    def __init__(self, uniforms):
        self._uniforms = list(uniforms)

    def uniform(self, low=0.0, high=1.0, size=None):
        value = self._uniforms.pop(0)
        if size is None:
            return value
        return np.broadcast_to(np.asarray(value, dtype=float), (size,) if np.isscalar(size) else size).copy()

    def integers(self, low, high=None, size=None):
        lo = 0 if high is None else low
        return np.zeros(size or 1, dtype=int) + lo

    def choice(self, n, size=None, replace=True):
        return np.arange(size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
