"""Ground-truth match labels and the matching / pose objectives.

Objectives are plain evaluable functions (no gradients); they are used to
score predictions and to validate label generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import KeypointSet
from .geometry import CameraIntrinsics, Pose, log_rotation, project_rc, rotation_angle, unproject_rc

PROB_CLAMP = 1e-12


@dataclass
class MatchLabels:
    matches: np.ndarray                       # (M, 2) index pairs (i in a, j in b)
    unmatched_a: np.ndarray                   # indices of unmatchable keypoints in a
    unmatched_b: np.ndarray
    ignored_a: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=int).reshape(-1, 2)
        self.unmatched_a = np.asarray(self.unmatched_a, dtype=int).reshape(-1)
        self.unmatched_b = np.asarray(self.unmatched_b, dtype=int).reshape(-1)
        self.ignored_a = np.asarray(self.ignored_a, dtype=int).reshape(-1)
        if (np.intersect1d(self.matches[:, 0], self.unmatched_a).size
                or np.intersect1d(self.matches[:, 1], self.unmatched_b).size):
            raise ValueError("a keypoint cannot be both matched and unmatchable")


@dataclass(frozen=True)
class LossConfig:
    lambda_t: float = 400.0
    lambda_r: float = 180.0
    lambda_p: float = 0.0
    eps: float = 1e-6
    geodesic: bool = False

    def __post_init__(self):
        if self.lambda_t < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.lambda_p <= 1.0:
            raise ValueError("lambda_p must be in [0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


def reproject(kp_a: KeypointSet, depth_a, pose_b_from_a: Pose, intrinsics: CameraIntrinsics):
    """Where each keypoint of image a lands in image b.

    Returns ``(rc_b, valid_depth, in_front)``: reprojected ``(row, col)``
    (nan when undefined), whether the keypoint had depth, and whether the
    transformed point lies in front of camera b.
    """
    depth_a = np.asarray(depth_a, dtype=float)
    pix = np.round(kp_a.rc).astype(int)
    pix[:, 0] = np.clip(pix[:, 0], 0, depth_a.shape[0] - 1)
    pix[:, 1] = np.clip(pix[:, 1], 0, depth_a.shape[1] - 1)
    d = depth_a[pix[:, 0], pix[:, 1]] if len(pix) else np.zeros(0)
    valid = np.isfinite(d) & (d > 0)
    rc_b = np.full((len(kp_a), 2), np.nan)
    in_front = np.zeros(len(kp_a), dtype=bool)
    if valid.any():
        Xa = unproject_rc(kp_a.rc[valid], d[valid], intrinsics)
        Xb = pose_b_from_a.apply(Xa)
        front = Xb[:, 2] > 0
        idx = np.flatnonzero(valid)
        in_front[idx[front]] = True
        rc_b[idx[front]] = project_rc(Xb[front], intrinsics)
    return rc_b, valid, in_front


def gt_correspondences(kp_a: KeypointSet, depth_a, pose_b_from_a: Pose,
                       intrinsics: CameraIntrinsics, kp_b: KeypointSet, reproj_tol=3.0) -> MatchLabels:
    """Label keypoint pairs from depth and relative pose.

    ``i`` matches ``j`` when ``j`` is the keypoint of b closest to the
    reprojection of ``i``, lies within ``reproj_tol`` px, and ``i`` is in turn
    the reprojection closest to ``j`` (so labels are one-to-one).  Keypoints
    of a whose reprojection leaves the image or has no keypoint within the
    tolerance are unmatchable; keypoints without depth are ignored.
    Keypoints of b with no reprojection within tolerance are unmatchable.
    """
    rc_b, valid, in_front = reproject(kp_a, depth_a, pose_b_from_a, intrinsics)
    inside = in_front & intrinsics.contains(np.nan_to_num(rc_b, nan=-1e9))
    n_a, n_b = len(kp_a), len(kp_b)
    dist = np.full((n_a, n_b), np.inf)
    if n_b and inside.any():
        diff = rc_b[inside][:, None, :] - kp_b.rc[None, :, :]
        dist[inside] = np.linalg.norm(diff, axis=2)
    close = dist <= reproj_tol
    matches = []
    if n_a and n_b:
        best_b = np.argmin(dist, axis=1)
        best_a = np.argmin(dist, axis=0)
        for i in range(n_a):
            j = best_b[i]
            if close[i, j] and best_a[j] == i:
                matches.append((i, j))
    matches = np.array(matches, dtype=int).reshape(-1, 2)
    has_a = close.any(axis=1) if n_b else np.zeros(n_a, dtype=bool)
    has_b = close.any(axis=0) if n_a else np.zeros(n_b, dtype=bool)
    unmatched_a = np.flatnonzero(valid & ~has_a)
    unmatched_b = np.flatnonzero(~has_b)
    return MatchLabels(matches, unmatched_a, unmatched_b, np.flatnonzero(~valid))


def _layer_term(P, labels: MatchLabels):
    total = 0.0
    terms = 0
    if len(labels.matches):
        p = P.P[labels.matches[:, 0], labels.matches[:, 1]]
        total += np.mean(np.log(np.maximum(p, PROB_CLAMP)))
        terms += 1
    for sigma, idx in ((P.sigma_a, labels.unmatched_a), (P.sigma_b, labels.unmatched_b)):
        if len(idx):
            total += 0.5 * np.mean(np.log(np.maximum(1.0 - sigma[idx], PROB_CLAMP)))
            terms += 1
    return -total, terms


def match_loss(per_layer, labels: MatchLabels):
    """Negative log-likelihood of the labels, averaged over layers.

    Per layer: mean ``-log P_ij`` over labelled matches plus half the mean
    ``-log(1 - sigma)`` over each side's unmatchable keypoints.  Empty sets
    drop their term.
    """
    if not per_layer:
        raise ValueError("need at least one layer")
    values = []
    for P in per_layer:
        v, terms = _layer_term(P, labels)
        if terms == 0:
            raise ValueError("labels are empty; the matching objective is undefined")
        values.append(v)
    return float(np.mean(values))


def pose_loss(pred: Pose, gt: Pose, cfg: LossConfig = LossConfig()):
    """Scale-free pose error: weighted distance between unit translation
    directions plus weighted distance between rotation logarithms."""
    tp, tg = pred.translation, gt.translation
    dt = tp / max(np.linalg.norm(tp), cfg.eps) - tg / max(np.linalg.norm(tg), cfg.eps)
    if cfg.geodesic:
        dr = rotation_angle(pred.rotation.T @ gt.rotation)
    else:
        dr = np.linalg.norm(log_rotation(pred.rotation) - log_rotation(gt.rotation))
    return float(cfg.lambda_t * np.linalg.norm(dt) + cfg.lambda_r * dr)


def total_loss(lm, lp, lambda_p):
    if not 0.0 <= lambda_p <= 1.0:
        raise ValueError("lambda_p must be in [0, 1]")
    if lambda_p == 0.0:
        return float(lm)
    if lambda_p == 1.0:
        return float(lp)
    return float((1.0 - lambda_p) * lm + lambda_p * lp)
