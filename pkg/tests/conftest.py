import numpy as np
import pytest

from monovo.geometry import Pose, exp_rotation


def random_pose(rng, max_angle=0.5, t_scale=1.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0.0, max_angle) / np.linalg.norm(w)
    return Pose(exp_rotation(w), rng.normal(size=3) * t_scale)


def two_view_scene(rng, n=50, outlier_fraction=0.0):
    """Points in front of two cameras; returns (R, t, xa, xb, inlier_mask)
    with calibrated coordinates and ``X_b = R X_a + t``."""
    R = exp_rotation(rng.normal(size=3) * 0.2)
    t = rng.normal(size=3)
    t[2] = abs(t[2]) * 0.3
    t /= np.linalg.norm(t)
    while True:
        X = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(3, 10, n)])
        Xb = X @ R.T + t
        if np.all(Xb[:, 2] > 0.5):
            break
    xa = X[:, :2] / X[:, 2:]
    xb = Xb[:, :2] / Xb[:, 2:]
    inl = np.ones(n, dtype=bool)
    n_out = int(round(outlier_fraction * n))
    if n_out:
        idx = rng.choice(n, n_out, replace=False)
        xb[idx] = rng.uniform(-0.5, 0.5, (n_out, 2))
        inl[idx] = False
    return R, t, xa, xb, inl


def angle_between(a, b):
    """Robust angle between vectors (atan2 form, accurate near 0)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
