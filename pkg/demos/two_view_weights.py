"""Two views, a quarter of the matches wrong, and what the weights buy.

The eight-point solver has no RANSAC: the only defence against bad matches
is the per-match confidence.  Here the confidences are either all 1 or an
oracle that zeroes the outliers, which is the best a learned matcher could
hope to predict.
"""

import numpy as np

from monovo.geometry import DegenerateGeometryError, exp_rotation, rotation_angle
from monovo.pose_solver import CorrespondenceSet, relative_pose

rng = np.random.default_rng(0)

# camera b sees the points after a small rotation and a sideways step
R = exp_rotation([0.02, -0.1, 0.01])
t = np.array([1.0, 0.1, 0.2])
t /= np.linalg.norm(t)
X = np.column_stack([rng.uniform(-3, 3, 80), rng.uniform(-2, 2, 80), rng.uniform(5, 15, 80)])
Xb = X @ R.T + t
xa, xb = X[:, :2] / X[:, 2:], Xb[:, :2] / Xb[:, 2:]

# half a pixel of noise at f=500, then corrupt 20 matches
xb += rng.normal(scale=0.5 / 500, size=xb.shape)
bad = rng.choice(80, 20, replace=False)
xb[bad] = rng.uniform(-0.4, 0.4, (20, 2))


def report(name, w):
    try:
        p = relative_pose(CorrespondenceSet(xa, xb, w))
    except DegenerateGeometryError as exc:
        print(f"{name:<16} failed: {exc}")
        return
    dr = np.degrees(rotation_angle(p.rotation.T @ R))
    dt = np.degrees(np.arccos(np.clip(p.translation @ t, -1, 1)))
    print(f"{name:<16} rotation error {dr:7.3f} deg   direction error {dt:7.3f} deg")


report("uniform weights", np.ones(80))
w = np.ones(80)
w[bad] = 0.0
report("outliers zeroed", w)
# soft confidences work too, as long as outliers are well below inliers
w = rng.uniform(0.7, 1.0, 80)
w[bad] = rng.uniform(0.0, 0.02, 20)
report("soft weights", w)
