"""Trajectory and matching metrics.

* ATE: RMSE of camera positions after a closed-form SE(3) or Sim(3)
  alignment (Umeyama).
* KITTI drift: translational (%) and rotational (deg/100 m) error of
  relative poses over 100..800 m segments, segment starts every 10 frames,
  as in the KITTI odometry devkit.
* Matching: recall at 5 px and mean matching accuracy at 1/3/5/10 px.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import Pose, rotation_angle
from .supervision import MatchLabels, reproject
from .trajectory import Trajectory

SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
MMA_THRESHOLDS = (1, 3, 5, 10)


class AlignmentMode(str, Enum):
    SE3 = "se3"
    SIM3 = "sim3"


def associate(est: Trajectory, gt: Trajectory, max_dt=0.02, by="auto", est_stride=1):
    """Index pairs ``(i_est, i_gt)``.

    ``by="id"`` pairs frame ``id * est_stride`` of the estimate with the
    ground-truth frame of that id; ``by="time"`` pairs each estimate with
    the nearest ground-truth timestamp within ``max_dt`` seconds.
    ``"auto"`` uses timestamps when both trajectories carry real ones.
    """
    if by == "auto":
        by = "time" if est.has_timestamps and gt.has_timestamps else "id"
    pairs = []
    if by == "id":
        lookup = {fid: k for k, fid in enumerate(gt.frame_ids)}
        for i, fid in enumerate(est.frame_ids):
            k = lookup.get(fid * est_stride)
            if k is not None:
                pairs.append((i, k))
    elif by == "time":
        t_gt = np.asarray(gt.timestamps)
        order = np.argsort(t_gt, kind="stable")
        ts = t_gt[order]
        for i, t in enumerate(est.timestamps):
            pos = np.searchsorted(ts, t)
            cands = [p for p in (pos - 1, pos) if 0 <= p < len(ts)]
            if not cands:
                continue
            best = min(cands, key=lambda p: abs(ts[p] - t))
            if abs(ts[best] - t) <= max_dt:
                pairs.append((i, int(order[best])))
    else:
        raise ValueError(f"unknown association {by!r}")
    return np.array(pairs, dtype=int).reshape(-1, 2)


def umeyama(src, dst, with_scale=True):
    """Similarity ``(s, R, t)`` minimizing ``sum ||dst - (s R src + t)||^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


@dataclass
class AteResult:
    rmse: float
    mode: AlignmentMode
    n_pairs: int
    alignment: Pose


def ate(est: Trajectory, gt: Trajectory, mode=AlignmentMode.SIM3, **assoc) -> float:
    return ate_report(est, gt, mode, **assoc).rmse


def ate_report(est: Trajectory, gt: Trajectory, mode=AlignmentMode.SIM3, **assoc) -> AteResult:
    mode = AlignmentMode(mode)
    pairs = associate(est, gt, **assoc)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 associated poses, found {len(pairs)}")
    pe = est.positions()[pairs[:, 0]]
    pg = gt.positions()[pairs[:, 1]]
    s, R, t = umeyama(pe, pg, with_scale=mode is AlignmentMode.SIM3)
    if s <= 0:
        s = 1.0
    aligned = s * pe @ R.T + t
    rmse = float(np.sqrt(np.mean(np.sum((aligned - pg) ** 2, axis=1))))
    # the identity is a feasible alignment; preferring it when it is at
    # least as good keeps SVD round-off out of already aligned inputs
    raw = float(np.sqrt(np.mean(np.sum((pe - pg) ** 2, axis=1))))
    if raw <= rmse:
        return AteResult(raw, mode, len(pairs), Pose.identity())
    return AteResult(rmse, mode, len(pairs), Pose(R, t, s))


# -- KITTI drift ---------------------------------------------------------------------

@dataclass
class DriftReport:
    t_rel: float  # percent
    r_rel: float  # deg / 100 m
    per_length: dict = field(default_factory=dict)  # length -> (t_rel %, r_rel deg/100m, count)
    n_segments: int = 0

    @property
    def empty(self):
        return self.n_segments == 0


def _distances(positions):
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def kitti_drift(est: Trajectory, gt: Trajectory, step=10, lengths=SEGMENT_LENGTHS, **assoc) -> DriftReport:
    pairs = associate(est, gt, **assoc)
    E = [est.poses[i] for i in pairs[:, 0]]
    G = [gt.poses[k] for k in pairs[:, 1]]
    per = {L: [] for L in lengths}
    if len(G) >= 2:
        dist = _distances(np.array([p.translation for p in G]))
        for first in range(0, len(G), step):
            for L in lengths:
                last = int(np.searchsorted(dist, dist[first] + L))
                if last >= len(G):
                    continue
                dg = G[first].inverse() @ G[last]
                de = E[first].inverse() @ E[last]
                err = de.inverse() @ dg
                per[L].append((np.linalg.norm(err.translation) / L,
                               rotation_angle(err.rotation) / L))
    all_errs = [e for L in lengths for e in per[L]]
    breakdown = {}
    for L in lengths:
        if per[L]:
            a = np.array(per[L])
            breakdown[L] = (100.0 * a[:, 0].mean(), math.degrees(a[:, 1].mean()) * 100.0, len(a))
        else:
            breakdown[L] = (0.0, 0.0, 0)
    if not all_errs:
        return DriftReport(0.0, 0.0, breakdown, 0)
    a = np.array(all_errs)
    return DriftReport(100.0 * a[:, 0].mean(), math.degrees(a[:, 1].mean()) * 100.0,
                       breakdown, len(a))


# -- matching -------------------------------------------------------------------------

@dataclass
class MatchingReport:
    recall: float
    mma: dict          # threshold px -> fraction
    n_predicted: int
    n_groundtruth: int
    empty_prediction: bool = False


def match_errors(pred, depth_a, pose_b_from_a, intrinsics):
    """Reprojection error (px) of every predicted match; inf without depth."""
    rc_b, valid, in_front = reproject(pred.kp_a, depth_a, pose_b_from_a, intrinsics)
    err = np.full(len(pred), np.inf)
    ok = in_front[pred.idx_a]
    err[ok] = np.linalg.norm(rc_b[pred.idx_a[ok]] - pred.kp_b.rc[pred.idx_b[ok]], axis=1)
    return err


def matching_metrics(pred, labels: MatchLabels, depth_a, pose_b_from_a, intrinsics,
                     thresholds=MMA_THRESHOLDS) -> MatchingReport:
    """A predicted match is correct at ``tau`` when its first keypoint
    reprojects within ``tau`` px of its second keypoint.  Matches whose first
    keypoint has no depth count as incorrect."""
    if depth_a is None:
        raise ValueError("matching metrics need a depth map")
    n_gt = len(labels.matches)
    if len(pred) == 0:
        return MatchingReport(0.0, {t: 0.0 for t in thresholds}, 0, n_gt, empty_prediction=True)
    err = match_errors(pred, depth_a, pose_b_from_a, intrinsics)
    mma = {t: float(np.mean(err <= t)) for t in thresholds}
    recall = float(np.count_nonzero(err <= 5) / n_gt) if n_gt else 0.0
    return MatchingReport(min(recall, 1.0), mma, len(pred), n_gt)


# -- reports -----------------------------------------------------------------------------

def report_rows(sequence, ate_result=None, drift=None, matching=None):
    rows = []
    if ate_result is not None:
        rows.append((f"ate_{ate_result.mode.value}_m", sequence, ate_result.rmse))
    if drift is not None:
        rows += [("t_rel_pct", sequence, drift.t_rel), ("r_rel_deg_per_100m", sequence, drift.r_rel)]
        for L, (t, r, n) in drift.per_length.items():
            rows += [(f"t_rel_{L}m_pct", sequence, t), (f"r_rel_{L}m_deg_per_100m", sequence, r)]
    if matching is not None:
        rows.append(("recall_5px", sequence, matching.recall))
        rows += [(f"mma_{t}px", sequence, v) for t, v in matching.mma.items()]
    return rows


def format_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "sequence", "value"])
    for m, s, v in rows:
        w.writerow([m, s, f"{v:.6f}"])
    return buf.getvalue()


def format_table(rows):
    if not rows:
        return ""
    wm = max(len("metric"), *(len(r[0]) for r in rows))
    ws = max(len("sequence"), *(len(str(r[1])) for r in rows))
    lines = [f"{'metric':<{wm}}  {'sequence':<{ws}}  {'value':>12}"]
    lines += [f"{m:<{wm}}  {str(s):<{ws}}  {v:>12.6f}" for m, s, v in rows]
    return "\n".join(lines) + "\n"
