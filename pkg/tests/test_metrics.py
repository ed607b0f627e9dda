import numpy as np
import pytest

from conftest import random_pose
from monovo.detector import KeypointSet
from monovo.geometry import CameraIntrinsics, Pose, exp_rotation
from monovo.matcher import MatchSet
from monovo.metrics import (AlignmentMode, associate, ate, ate_report, format_csv, format_table, kitti_drift,
                            matching_metrics, report_rows, umeyama)
from monovo.supervision import gt_correspondences
from monovo.trajectory import Trajectory


def wavy(n=60, rng=None):
    rng = rng or np.random.default_rng(1)
    s = np.linspace(0, 1, n)
    poses = [Pose(exp_rotation([0.1 * np.sin(3 * v), 0.3 * v, 0.0]), [20 * v, np.sin(6 * v), 3 * np.cos(4 * v)])
             for v in s]
    return Trajectory.from_poses(poses)


def straight(n=1001, step=1.0, scale=1.0, yaw_per_m=0.0):
    poses = [Pose(exp_rotation([0, 0, yaw_per_m * k * step]), [scale * k * step, 0.0, 0.0]) for k in range(n)]
    return Trajectory.from_poses(poses)


def test_ate_identity_and_scale():
    gt = wavy()
    assert ate(gt, gt) == pytest.approx(0.0, abs=1e-12)
    est = Trajectory.from_poses([Pose(p.rotation, 2.0 * p.translation) for p in gt.poses])
    assert ate(est, gt, AlignmentMode.SIM3) < 1e-9
    assert ate(est, gt, AlignmentMode.SE3) > 0.1


def test_ate_constant_offset_se3():
    gt = wavy()
    est = Trajectory.from_poses([Pose(p.rotation, p.translation + [1.0, 0, 0]) for p in gt.poses])
    assert ate(est, gt, "se3") < 1e-9


def test_ate_similarity_invariance(rng):
    gt = wavy()
    noisy = Trajectory.from_poses([Pose(p.rotation, p.translation + rng.normal(scale=0.1, size=3))
                                   for p in gt.poses])
    base = ate(noisy, gt)
    base_se3 = ate(noisy, gt, "se3")
    for _ in range(5):
        T = random_pose(rng, max_angle=3.0, t_scale=10.0)
        S = Pose(T.rotation, T.translation, rng.uniform(0.2, 5.0))
        assert abs(ate(noisy.transformed(S), gt) - base) < 1e-9
        assert abs(ate(noisy.transformed(T), gt, "se3") - base_se3) < 1e-9


def test_ate_report_alignment_and_errors():
    gt = wavy()
    r = ate_report(gt, gt)
    assert r.n_pairs == len(gt) and r.alignment.scale == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ate(Trajectory.from_poses([Pose.identity()]), gt)


def test_umeyama_recovers_similarity(rng):
    src = rng.normal(size=(30, 3))
    T = random_pose(rng, 2.0)
    dst = 1.7 * src @ T.rotation.T + T.translation
    s, R, t = umeyama(src, dst)
    assert s == pytest.approx(1.7) and np.allclose(R, T.rotation) and np.allclose(t, T.translation)


def test_association_by_id_stride_and_time():
    gt = Trajectory.from_poses([Pose.identity()] * 10, frame_ids=range(10))
    est = Trajectory.from_poses([Pose.identity()] * 5, frame_ids=range(5))
    assert associate(est, gt, by="id", est_stride=2)[:, 1].tolist() == [0, 2, 4, 6, 8]
    gt_t = Trajectory.from_poses([Pose.identity()] * 3, timestamps=[0.0, 0.1, 0.2])
    est_t = Trajectory.from_poses([Pose.identity()] * 3, timestamps=[0.005, 0.15, 0.31])
    assert associate(est_t, gt_t).tolist() == [[0, 0]]


def test_drift_self_is_zero():
    gt = straight()
    d = kitti_drift(gt, gt)
    assert (d.t_rel, d.r_rel) == (0.0, 0.0) and not d.empty
    assert sorted(d.per_length) == [100, 200, 300, 400, 500, 600, 700, 800]


def test_drift_scale_bias():
    d = kitti_drift(straight(scale=1.01), straight())
    assert d.t_rel == pytest.approx(1.0, abs=0.05)
    assert d.r_rel == pytest.approx(0.0, abs=1e-9)


def test_drift_yaw_rate_bias():
    d = kitti_drift(straight(yaw_per_m=np.radians(0.1)), straight())
    assert d.r_rel == pytest.approx(10.0, abs=1e-6)


def test_drift_short_path_empty():
    d = kitti_drift(wavy(), wavy())
    assert d.empty and d.t_rel == 0.0


# -- matching -------------------------------------------------------------------------

K = CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)


def matching_case(rng, shift=0.0):
    depth = np.full((K.height, K.width), 5.0)
    rc = np.column_stack([rng.integers(20, 220, 40), rng.integers(20, 300, 40)]).astype(float)
    rc = np.unique(rc, axis=0)
    T = Pose(np.eye(3), [0.1, 0.0, 0.0])  # 6 px shift along columns at 5 m
    a = KeypointSet(rc, np.ones(len(rc)), (K.height, K.width))
    b = KeypointSet(rc + [0.0, 6.0 + shift], np.ones(len(rc)), (K.height, K.width))
    labels = gt_correspondences(a, depth, T, K, b)
    n = len(rc)
    m = MatchSet(np.arange(n), np.arange(n), np.ones(n), np.ones(n), a, b)
    return m, labels, depth, T


def test_matching_exact(rng):
    m, labels, depth, T = matching_case(rng)
    r = matching_metrics(m, labels, depth, T, K)
    assert r.recall == 1.0 and all(v == 1.0 for v in r.mma.values())


def test_matching_perturbed(rng):
    m, _, depth, T = matching_case(rng, shift=4.0)
    _, labels, _, _ = matching_case(np.random.default_rng(12345))
    r = matching_metrics(m, labels, depth, T, K)
    assert r.mma == {1: 0.0, 3: 0.0, 5: 1.0, 10: 1.0}


def test_matching_empty_and_no_depth(rng):
    m, labels, depth, T = matching_case(rng)
    empty = MatchSet([], [], [], [], m.kp_a, m.kp_b)
    r = matching_metrics(empty, labels, depth, T, K)
    assert r.empty_prediction and r.recall == 0.0 and all(v == 0.0 for v in r.mma.values())
    with pytest.raises(ValueError):
        matching_metrics(m, labels, None, T, K)


def test_mma_monotone(rng):
    m, labels, depth, T = matching_case(rng)
    m.kp_b.rc[:] += rng.normal(scale=4.0, size=m.kp_b.rc.shape)
    r = matching_metrics(m, labels, depth, T, K)
    v = [r.mma[t] for t in sorted(r.mma)]
    assert v == sorted(v)


def test_report_formats():
    rows = report_rows("seq", ate_report(wavy(), wavy()), kitti_drift(straight(), straight()))
    csv = format_csv(rows)
    assert csv.splitlines()[0] == "metric,sequence,value"
    assert csv.splitlines()[1].startswith("ate_sim3_m,seq,0.000000")
    table = format_table(rows)
    assert table.splitlines()[0].split() == ["metric", "sequence", "value"]
    assert len(table.splitlines()) == len(rows) + 1
