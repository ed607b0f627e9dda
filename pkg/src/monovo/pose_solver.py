"""Confidence-weighted eight-point relative pose.

Correspondences are calibrated image coordinates; each row of the design
matrix is the coefficient vector of ``x_b^T E x_a`` with respect to the
row-major flattening of ``E``.  The weighted system ``diag(w) Phi vec(E) = 0``
is solved by SVD, projected onto the essential manifold, decomposed into
four ``(R, t)`` candidates, and the candidate that puts the most
(weighted) triangulated points in front of both cameras wins.

Poses follow ``X_b = R @ X_a + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DegenerateGeometryError, Pose, skew, triangulate_many

# 90 degree rotation about z used by the essential-matrix decomposition
_W = np.array([[0.0, -1.0, 0.0],
               [1.0, 0.0, 0.0],
               [0.0, 0.0, 1.0]])


@dataclass
class CorrespondenceSet:
    xa: np.ndarray  # (N, 2) calibrated coordinates in view a
    xb: np.ndarray  # (N, 2) calibrated coordinates in view b
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.xa = np.asarray(self.xa, dtype=float).reshape(-1, 2)
        self.xb = np.asarray(self.xb, dtype=float).reshape(-1, 2)
        n = len(self.xa)
        self.weights = (np.ones(n) if self.weights is None
                        else np.asarray(self.weights, dtype=float).reshape(-1))
        if len(self.xb) != n or len(self.weights) != n:
            raise ValueError("correspondence arrays must have equal length")
        if n < 8:
            raise ValueError(f"need at least 8 correspondences, got {n}")
        if not (np.all(np.isfinite(self.xa)) and np.all(np.isfinite(self.xb))
                and np.all(np.isfinite(self.weights))):
            raise ValueError("correspondences must be finite")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        if np.count_nonzero(self.weights > 0) < 8:
            raise ValueError("need at least 8 correspondences with positive weight")

    def __len__(self):
        return len(self.xa)


@dataclass(frozen=True)
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray  # unit direction

    def pose(self, scale=1.0):
        return Pose(self.rotation, scale * self.translation)


def design_rows(xa, xb):
    """Rows ``kron([xb, 1], [xa, 1])`` so that ``row @ E.ravel() = xb^T E xa``.

    Expanded: ``[xb*xa, xb*ya, xb, yb*xa, yb*ya, yb, xa, ya, 1]``.
    """
    ha = np.hstack([xa, np.ones((len(xa), 1))])
    hb = np.hstack([xb, np.ones((len(xb), 1))])
    return (hb[:, :, None] * ha[:, None, :]).reshape(len(xa), 9)


def build_design_matrix(c: CorrespondenceSet):
    """Return ``(Phi, diag(w) @ Phi)``."""
    phi = design_rows(c.xa, c.xb)
    return phi, c.weights[:, None] * phi


def essential_from_pose(R, t):
    return skew(t) @ R


def project_to_essential(M):
    """Closest matrix with singular values ``(s, s, 0)``, scaled to ``s = 1``."""
    U, S, Vt = np.linalg.svd(M)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def solve_essential(c: CorrespondenceSet, rank_tol=1e-10):
    """Weighted eight-point estimate of ``E`` (``||E||_F = sqrt(2)``).

    Rows with zero weight are dropped before the SVD, which is the same
    least-squares problem and makes down-weighting exactly equivalent to
    deletion.
    """
    _, A = build_design_matrix(c)
    A = A[c.weights > 0]
    _, S, Vt = np.linalg.svd(A, full_matrices=True)
    # a unique null vector needs rank 8: the 8th singular value must not vanish
    if S[7] <= rank_tol * S[0]:
        raise DegenerateGeometryError(
            f"eight-point system is rank deficient (s8/s1 = {S[7] / S[0]:.3g})")
    E = Vt[-1].reshape(3, 3)
    return project_to_essential(E)


def decompose_essential(E):
    """The four ``(R, t)`` candidates of an essential matrix, ``||t|| = 1``."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def cheirality_votes(R, t, c: CorrespondenceSet, weighted=True):
    """Weight (or count) of correspondences triangulated in front of both views."""
    _, d1, d2 = triangulate_many(c.xa, c.xb, R, t)
    good = np.isfinite(d1) & np.isfinite(d2) & (d1 > 0) & (d2 > 0)
    return float(np.sum(c.weights[good]) if weighted else np.count_nonzero(good & (c.weights > 0)))


def decompose_and_select(E, c: CorrespondenceSet, weighted=True) -> RelativePose:
    candidates = decompose_essential(E)
    votes = [cheirality_votes(R, t, c, weighted) for R, t in candidates]
    best = int(np.argmax(votes))
    total = float(np.sum(c.weights) if weighted else np.count_nonzero(c.weights > 0))
    if votes[best] <= 0.5 * total:
        raise DegenerateGeometryError(
            f"no pose candidate puts a majority of points in front of both cameras "
            f"(best {votes[best]:.3g} of {total:.3g})")
    R, t = candidates[best]
    return RelativePose(R, t)


def relative_pose(c: CorrespondenceSet, weighted_vote=True) -> RelativePose:
    return decompose_and_select(solve_essential(c), c, weighted=weighted_vote)
