"""``monovo`` command-line entry point.

Every command exits with status 0 on success and 1 with a one-line
diagnostic on stderr otherwise.  All randomness is driven by ``--seed``.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys

import numpy as np

from . import descriptor as desc
from . import metrics
from .datasets import read_manifest, read_pnm, read_trajectory, write_trajectory
from .detector import detect
from .fmap import write_fmap
from .geometry import DegenerateGeometryError
from .pipeline import (Frontend, PipelineConfig, VisualOdometry, config_keys, correspondences,
                       frames_from_manifest, make_matcher, read_config)
from .pose_solver import relative_pose
from .supervision import gt_correspondences
from .synthetic import generate_sequence, make_scene, save_sequence

PROG = "monovo"

DETECTOR_KEYS = ("gaussian_kernel", "gaussian_sigma", "patch_size", "nms_radius",
                 "grad_threshold", "top_k")
FRONTEND_KEYS = DETECTOR_KEYS + ("provider", "fusion_weights", "normalize_descriptors")
MATCH_KEYS = FRONTEND_KEYS + ("matcher", "match_threshold", "mnn_threshold", "matcher_weights",
                              "weighted_vote", "min_matches")
ODOMETRY_KEYS = ("keyframe_threshold", "stride", "scale_source", "refresh_matches")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _Formatter(argparse.HelpFormatter):
    def _get_help_string(self, action):
        text = action.help or ""
        d = action.default
        if d is not None and d is not False and d is not argparse.SUPPRESS and "default" not in text:
            text += " (default: %(default)s)"
        return text


def _bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_TYPES = {"int": int, "float": float, "bool": _bool}


def _add_config_flags(p, keys):
    """One ``--flag`` per config key; values left unset fall back to the
    config file, then to the built-in defaults shown in the help."""
    types = config_keys()
    defaults = {f.name: f.default for f in dataclasses.fields(PipelineConfig)}
    p.add_argument("--config", help="flat 'key = value' config file")
    for key in keys:
        kind = types[key].split("|")[0].strip()
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=_TYPES.get(kind, str),
                       default=None, help=f"(default: {defaults[key]})")


def _config(args, keys, **extra):
    overrides = {k: getattr(args, k) for k in keys}
    return read_config(args.config, overrides, seed=args.seed, **extra)


def _open_out(path):
    return contextlib.nullcontext(sys.stdout) if path in (None, "-") else open(path, "w")


def _frame(manifest, config, index):
    for fd in frames_from_manifest(manifest, config):
        if fd.frame_id == index:
            return fd
    raise ValueError(f"frame {index} is not in the manifest")


# -- commands ---------------------------------------------------------------------------

def cmd_detect(args):
    cfg = _config(args, DETECTOR_KEYS)
    kp = detect(read_pnm(args.image), cfg.detector)
    with _open_out(args.out) as f:
        for (r, c), s in zip(kp.rc, kp.scores):
            f.write(f"{int(r)} {int(c)} {s:.9g}\n")


def cmd_describe(args):
    cfg = _config(args, FRONTEND_KEYS)
    img = read_pnm(args.image)
    kp = detect(img, cfg.detector)
    if cfg.provider == "file":
        if not (args.coarse and args.fine):
            raise ValueError("the file provider needs --coarse and --fine")
        coarse, fine = desc.file_provider(args.coarse, args.fine)
    else:
        coarse, fine = desc.classical_provider(img)
    fusion = desc.FusionWeights.load(cfg.fusion_weights) if cfg.fusion_weights \
        else desc.FusionWeights.random(cfg.seed)
    d = desc.describe(kp, coarse, fine, fusion, normalize=cfg.normalize_descriptors)
    if args.out and args.out.endswith(".fmap"):
        write_fmap(args.out, d.descriptors[:, None, :])
        return
    with _open_out(args.out) as f:
        for (r, c), v in zip(kp.rc, d.descriptors):
            f.write(f"{int(r)} {int(c)} " + " ".join(f"{x:.9g}" for x in v) + "\n")


def _match_pair(args, cfg, manifest):
    fe, matcher = Frontend(cfg), make_matcher(cfg)
    fa, fb = _frame(manifest, cfg, args.frame_a), _frame(manifest, cfg, args.frame_b)
    a, b = fe(fa), fe(fb)
    return fa, fb, matcher(a.keypoints, a.descriptors, b.keypoints, b.descriptors)


def cmd_match(args):
    manifest = read_manifest(args.manifest)
    cfg = _config(args, MATCH_KEYS, intrinsics=manifest.intrinsics)
    _, _, m = _match_pair(args, cfg, manifest)
    pa, pb = m.points()
    with _open_out(args.out) as f:
        f.write("# row_a col_a row_b col_b probability weight\n")
        for (ra, ca), (rb, cb), p, w in zip(pa, pb, m.probs, m.weights):
            f.write(f"{ra:.6g} {ca:.6g} {rb:.6g} {cb:.6g} {p:.6g} {w:.6g}\n")
        try:
            rel = relative_pose(correspondences(m, cfg.intrinsics), weighted_vote=cfg.weighted_vote)
        except (DegenerateGeometryError, ValueError) as exc:
            f.write(f"# pose unavailable: {exc}\n")
            return
        vals = " ".join(f"{x:.12g}" for x in np.hstack([rel.rotation.ravel(), rel.translation]))
        f.write(f"# pose b_from_a (R row-major, unit t): {vals}\n")


def cmd_odometry(args):
    manifest = read_manifest(args.manifest)
    keys = MATCH_KEYS + ODOMETRY_KEYS
    cfg = _config(args, keys, intrinsics=manifest.intrinsics)
    gt = read_trajectory(args.gt) if args.gt else manifest.load_groundtruth()
    if cfg.scale_source == "unit":
        gt = None
    vo = VisualOdometry(cfg, gt)
    traj = vo.run(frames_from_manifest(manifest, cfg), threads=args.threads)
    write_trajectory(args.out, traj, args.format)
    lost = int(np.count_nonzero(~np.asarray(traj.tracked)))
    print(f"{len(traj)} frames, {int(np.count_nonzero(traj.keyframe))} keyframes, {lost} untracked"
          f" -> {args.out}")


def _emit(rows, fmt, out):
    text = metrics.format_csv(rows) if fmt == "csv" else metrics.format_table(rows)
    with _open_out(out) as f:
        f.write(text)


def _sequence_name(args):
    return args.sequence or os.path.basename(args.est)


def cmd_eval_ate(args):
    est, gt = read_trajectory(args.est), read_trajectory(args.gt)
    res = metrics.ate_report(est, gt, metrics.AlignmentMode(args.mode), est_stride=args.est_stride)
    if args.format == "plain":
        print(f"ATE {res.rmse:.3f} m ({res.mode.value}, {res.n_pairs} poses)")
        return
    _emit(metrics.report_rows(_sequence_name(args), ate_result=res), args.format, args.out)


def cmd_eval_rpe(args):
    est, gt = read_trajectory(args.est), read_trajectory(args.gt)
    drift = metrics.kitti_drift(est, gt, est_stride=args.est_stride)
    if drift.empty:
        print("warning: trajectory shorter than 100 m, drift report is empty", file=sys.stderr)
    if args.format == "plain":
        print(f"t_rel {drift.t_rel:.3f} %  r_rel {drift.r_rel:.3f} deg/100m ({drift.n_segments} segments)")
        return
    _emit(metrics.report_rows(_sequence_name(args), drift=drift), args.format, args.out)


def cmd_eval_match(args):
    manifest = read_manifest(args.manifest)
    cfg = _config(args, MATCH_KEYS, intrinsics=manifest.intrinsics)
    gt = manifest.load_groundtruth()
    if gt is None:
        raise ValueError("matching evaluation needs ground-truth poses in the manifest")
    fa, fb, m = _match_pair(args, cfg, manifest)
    if fa.depth is None:
        raise ValueError(f"frame {args.frame_a} has no depth map")
    b_from_a = gt.pose_by_id(fb.frame_id).inverse() @ gt.pose_by_id(fa.frame_id)
    labels = gt_correspondences(m.kp_a, fa.depth, b_from_a, cfg.intrinsics, m.kp_b)
    rep = metrics.matching_metrics(m, labels, fa.depth, b_from_a, cfg.intrinsics)
    if rep.empty_prediction:
        print("warning: no predicted matches, MMA reported as 0", file=sys.stderr)
    name = args.sequence or f"{args.frame_a}-{args.frame_b}"
    fmt = "table" if args.format == "plain" else args.format
    _emit(metrics.report_rows(name, matching=rep), fmt, args.out)


def cmd_synth(args):
    scene = make_scene(args.seed, n_frames=args.frames, path_length=args.path_length,
                       n_points=args.points, pixel_noise=args.noise,
                       outlier_fraction=args.outliers, view=args.view)
    seq = generate_sequence(scene, args.seed, args.mode)
    path = save_sequence(seq, args.out)
    print(f"{args.frames} frames -> {path}")


# -- parser -----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog=PROG, description="Monocular frame-to-keyframe visual odometry toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_,
                            formatter_class=_Formatter)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=0, help="seed for every random initialization")
        return sp

    sp = command("detect", cmd_detect, "Detect keypoints; prints 'row col score' per line.")
    sp.add_argument("--image", required=True, help="PGM/PPM image")
    sp.add_argument("--out", help="output file (stdout if omitted)")
    _add_config_flags(sp, DETECTOR_KEYS)

    sp = command("describe", cmd_describe,
                 "Detect and describe; prints 'row col d1 .. d192' per line, or FMAP for --out *.fmap.")
    sp.add_argument("--image", required=True)
    sp.add_argument("--coarse", help="coarse FMAP (file provider)")
    sp.add_argument("--fine", help="fine FMAP (file provider)")
    sp.add_argument("--out")
    _add_config_flags(sp, FRONTEND_KEYS)

    for name, fn, text in (("match", cmd_match, "Match two manifest frames; prints the matches and relative pose."),
                           ("eval-match", cmd_eval_match, "Recall@5px and MMA of a frame pair against depth + ground truth.")):
        sp = command(name, fn, text)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--frame-a", type=int, required=True)
        sp.add_argument("--frame-b", type=int, required=True)
        sp.add_argument("--out")
        if name == "eval-match":
            sp.add_argument("--format", choices=("plain", "table", "csv"), default="table")
            sp.add_argument("--sequence", help="sequence name in the report")
        _add_config_flags(sp, MATCH_KEYS)

    sp = command("odometry", cmd_odometry, "Run visual odometry over a sequence manifest.")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="trajectory file (.kitti.txt or .tum.txt)")
    sp.add_argument("--format", choices=("kitti", "tum"), help="override the format implied by --out")
    sp.add_argument("--gt", help="ground truth for scaling (default: the manifest's)")
    sp.add_argument("--threads", type=int, default=1, help="feature-extraction prefetch threads")
    _add_config_flags(sp, MATCH_KEYS + ODOMETRY_KEYS)

    for name, fn, text in (("eval-ate", cmd_eval_ate, "Absolute trajectory error after alignment."),
                           ("eval-rpe", cmd_eval_rpe, "KITTI relative drift over 100-800 m segments.")):
        sp = command(name, fn, text)
        sp.add_argument("--est", required=True)
        sp.add_argument("--gt", required=True)
        if name == "eval-ate":
            sp.add_argument("--mode", choices=("sim3", "se3"), default="sim3")
        sp.add_argument("--est-stride", type=int, default=1,
                        help="frame-id step of the estimate when it lacks timestamps")
        sp.add_argument("--format", choices=("plain", "table", "csv"), default="plain")
        sp.add_argument("--sequence", help="sequence name in table/csv reports")
        sp.add_argument("--out")

    sp = command("synth", cmd_synth, "Generate a synthetic sequence directory with a manifest.")
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=50)
    sp.add_argument("--path-length", type=float, default=20.0, help="meters")
    sp.add_argument("--points", type=int, default=1000)
    sp.add_argument("--noise", type=float, default=0.0, help="pixel noise std of the tracks")
    sp.add_argument("--outliers", type=float, default=0.0, help="outlier fraction of the tracks")
    sp.add_argument("--view", choices=("forward", "side"), default="forward")
    sp.add_argument("--mode", choices=("direct", "render", "both"), default="both")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes one diagnostic line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
