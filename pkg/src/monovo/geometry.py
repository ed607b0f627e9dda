"""Rigid-body and pinhole-camera primitives.

Conventions used throughout the package:

* A :class:`Pose` maps points ``X`` to ``s * R @ X + t``.  ``compose(a, b)``
  applies ``b`` first, then ``a``.
* Pixel coordinates are ``(row, col)`` pairs.  Calibrated (normalized)
  image coordinates are ``((col - cx) / fx, (row - cy) / fy)``, i.e. the
  usual ``(x, y)`` of the camera frame with ``z`` pointing forward.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class DegenerateGeometryError(ValueError):
    """Raised when a geometric problem has no well-defined solution."""


class NearPiRotationWarning(RuntimeWarning):
    pass


def skew(v):
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.abs(R @ R.T - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def project_to_so3(M):
    """Closest rotation to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def exp_rotation(w):
    """Rodrigues' formula: axis-angle vector (radians) to rotation matrix."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + math.sin(theta) / theta * K
            + (1.0 - math.cos(theta)) / theta**2 * K @ K)


def rotation_to_quaternion(R):
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s,
             (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s,
             (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
             0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[3] >= 0 else -q


def quaternion_to_rotation(q):
    x, y, z, w = np.asarray(q, dtype=float).reshape(4) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def log_rotation(R):
    """SO(3) logarithm as an axis-angle vector with angle in ``[0, pi]``.

    Goes through the quaternion so the result stays accurate close to
    ``pi``; at (numerically) ``pi`` the axis sign is ambiguous and a
    :class:`NearPiRotationWarning` is emitted.
    """
    q = rotation_to_quaternion(R)
    v, w = q[:3], q[3]
    sin_half = np.linalg.norm(v)
    if sin_half < 1e-12:
        # small angle: log(R) ~ vee(R - R^T) / 2, equal to 2*v to first order
        return 2.0 * v
    theta = 2.0 * math.atan2(sin_half, w)
    if math.pi - theta < 1e-6:
        warnings.warn(f"rotation angle {theta:.9f} is within 1e-6 of pi; "
                      "axis sign is arbitrary", NearPiRotationWarning, stacklevel=2)
    return theta * v / sin_half


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(np.asarray(R, dtype=float)) - 1.0) / 2.0
    # arccos loses precision near 0; use the norm of the log instead there
    if c > 0.999:
        return float(np.linalg.norm(log_rotation(R)))
    return float(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class Pose:
    """Similarity transform ``X -> scale * R @ X + t`` (``scale = 1`` for SE(3))."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"pose scale must be positive, got {self.scale}")
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        if not is_rotation(R, tol=1e-6):
            raise ValueError("pose rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        """From a 3x4 or 4x4 ``[R|t]`` matrix (a uniform scale on R is allowed)."""
        T = np.asarray(T, dtype=float)
        M = T[:3, :3]
        s = np.cbrt(np.linalg.det(M))
        return cls(M / s, T[:3, 3], s)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        """Transform an ``(N, 3)`` array (or a single 3-vector)."""
        P = np.asarray(points, dtype=float)
        return self.scale * P @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation / self.scale, 1.0 / self.scale)

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return (f"Pose(rotvec={np.round(log_rotation(self.rotation), 6).tolist()}, "
                f"t={np.round(self.translation, 6).tolist()}, scale={self.scale:g})")


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` and then ``a``."""
    R = a.rotation @ b.rotation
    # keep the product on SO(3) so long chains do not drift
    if not is_rotation(R, tol=1e-12):
        R = project_to_so3(R)
    return Pose(R, a.scale * a.rotation @ b.translation + a.translation,
                a.scale * b.scale)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor):
        return CameraIntrinsics(self.fx * factor, self.fy * factor,
                                self.cx * factor, self.cy * factor,
                                int(round(self.width * factor)),
                                int(round(self.height * factor)))

    def normalize(self, rc):
        """Pixel ``(row, col)`` array -> calibrated ``(x, y)`` array."""
        rc = np.asarray(rc, dtype=float)
        return np.stack([(rc[..., 1] - self.cx) / self.fx,
                         (rc[..., 0] - self.cy) / self.fy], axis=-1)

    def denormalize(self, xy):
        """Calibrated ``(x, y)`` -> pixel ``(row, col)``."""
        xy = np.asarray(xy, dtype=float)
        return np.stack([xy[..., 1] * self.fy + self.cy,
                         xy[..., 0] * self.fx + self.cx], axis=-1)

    def contains(self, rc, margin=0.0):
        rc = np.asarray(rc, dtype=float)
        return ((rc[..., 0] >= margin) & (rc[..., 0] <= self.height - 1 - margin)
                & (rc[..., 1] >= margin) & (rc[..., 1] <= self.width - 1 - margin))


def project(point, intrinsics: CameraIntrinsics):
    """Pinhole projection to pixel ``(u, v) = (fx x/z + cx, fy y/z + cy)``.

    Accepts a 3-vector or an ``(N, 3)`` batch.  Note the output is in
    ``(u, v)`` = ``(col, row)`` order; use :func:`project_rc` for
    ``(row, col)``.
    """
    P = np.asarray(point, dtype=float)
    z = P[..., 2]
    if np.any(z <= 0):
        raise DegenerateGeometryError("cannot project a point with non-positive depth")
    u = intrinsics.fx * P[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * P[..., 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1)


def project_rc(points, intrinsics: CameraIntrinsics):
    return project(points, intrinsics)[..., ::-1]


def unproject_rc(rc, depth, intrinsics: CameraIntrinsics):
    """Back-project pixels ``(row, col)`` with z-depth to camera-frame points."""
    xy = intrinsics.normalize(rc)
    depth = np.asarray(depth, dtype=float)
    return np.concatenate([xy * depth[..., None], depth[..., None]], axis=-1)


def triangulate_many(x1, x2, R, t):
    """Linear (DLT) two-view triangulation of calibrated point pairs.

    ``x1``/``x2`` are ``(N, 2)`` calibrated coordinates in views 1 and 2,
    with ``X2 = R @ X1 + t``.  Returns the points in view 1 (``(N, 3)``,
    possibly inf/nan for points at infinity) and the depths in both views.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, np.reshape(t, (3, 1))])
    A = np.empty((len(x1), 4, 4))
    A[:, 0] = x1[:, [0]] * P1[2] - P1[0]
    A[:, 1] = x1[:, [1]] * P1[2] - P1[1]
    A[:, 2] = x2[:, [0]] * P2[2] - P2[0]
    A[:, 3] = x2[:, [1]] * P2[2] - P2[1]
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:]
    d1 = X[:, 2]
    d2 = X @ np.asarray(R)[2] + np.reshape(t, 3)[2]
    return X, d1, d2


def triangulate(x1, x2, pose_2_from_1: Pose, parallax_tol=1e-9):
    """Triangulate one calibrated correspondence.

    Returns ``(X1, depth1, depth2)``.  Raises
    :class:`DegenerateGeometryError` when the two viewing rays are parallel
    (no parallax) or the baseline vanishes, since the point is then not
    determined.
    """
    if pose_2_from_1.scale != 1.0:
        pose_2_from_1 = Pose(pose_2_from_1.rotation,
                             pose_2_from_1.translation / pose_2_from_1.scale)
    R, t = pose_2_from_1.rotation, pose_2_from_1.translation
    if np.linalg.norm(t) < parallax_tol:
        raise DegenerateGeometryError("zero baseline; point is undetermined")
    r1 = R @ np.array([x1[0], x1[1], 1.0])
    r2 = np.array([x2[0], x2[1], 1.0])
    sin_par = np.linalg.norm(np.cross(r1, r2)) / (np.linalg.norm(r1) * np.linalg.norm(r2))
    if sin_par < parallax_tol:
        raise DegenerateGeometryError("viewing rays are parallel; point is undetermined")
    X, d1, d2 = triangulate_many(np.asarray(x1)[None], np.asarray(x2)[None], R, t)
    if not np.all(np.isfinite(X)):
        raise DegenerateGeometryError("triangulated point lies at infinity")
    return X[0], float(d1[0]), float(d2[0])
