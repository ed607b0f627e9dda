"""Sequence ingestion and serialization.

Formats
-------
KITTI trajectory
    One pose per line: 12 reals, the row-major 3x4 ``[R|t]`` camera-to-world
    matrix.  Frame ``k`` is line ``k``.
TUM trajectory
    One pose per line: ``timestamp tx ty tz qx qy qz qw``.  Lines starting
    with ``#`` are comments.
PGM/PPM
    8-bit netpbm images (``P2``/``P5`` grey, ``P3``/``P6`` colour).
Manifest
    Sectioned text file describing one sequence::

        [camera]
        fx = 320.0
        fy = 320.0
        cx = 160.0
        cy = 120.0
        width = 320
        height = 240

        [sequence]
        groundtruth = groundtruth.txt       # optional
        groundtruth_format = kitti          # kitti | tum
        body_to_camera = r11 ... r34        # optional 12 reals, [R|t]

        [frames]
        timestamp image depth coarse fine tracks
        0.000000 images/000000.pgm depth/000000.fmap - - -

    The first line of ``[frames]`` names the columns; ``timestamp`` is
    required, the others are optional and ``-`` marks a missing entry.
    Paths are relative to the manifest.  Depth maps are FMAP files with
    ``C = 1`` in meters (``<= 0`` means no depth).
Tracks
    Direct-correspondence observations of one frame, one per line:
    ``track_id row col is_outlier``.
"""

from __future__ import annotations

import math
import os
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fmap import read_fmap, write_fmap
from .geometry import CameraIntrinsics, Pose, is_rotation, project_to_so3, quaternion_to_rotation, \
    rotation_to_quaternion
from .trajectory import Trajectory


class FormatError(ValueError):
    pass


def _floats(tokens, where):
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None
    if not all(math.isfinite(v) for v in vals):
        raise FormatError(f"{where}: non-finite value")
    return vals


def _rigid(R, t, where):
    R = np.asarray(R, dtype=float)
    if not is_rotation(R, tol=1e-6):
        if abs(np.linalg.det(R) - 1.0) > 0.1:
            raise FormatError(f"{where}: matrix is not a rotation")
        warnings.warn(f"{where}: rotation re-orthonormalized", stacklevel=3)
        R = project_to_so3(R)
    return Pose(R, t)


# -- trajectories --------------------------------------------------------------

def read_kitti(path) -> Trajectory:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tokens = line.split()
            if not tokens:
                continue
            where = f"{path}:{lineno}"
            if len(tokens) != 12:
                raise FormatError(f"{where}: expected 12 values, got {len(tokens)}")
            M = np.array(_floats(tokens, where)).reshape(3, 4)
            poses.append(_rigid(M[:, :3], M[:, 3], where))
    traj = Trajectory.from_poses(poses)
    return traj


def write_kitti(path, traj: Trajectory):
    with open(path, "w") as f:
        for p in traj.poses:
            M = np.hstack([p.scale * p.rotation, p.translation[:, None]])
            f.write(" ".join(f"{v:.17g}" for v in M.ravel()) + "\n")


def read_tum(path) -> Trajectory:
    poses, stamps = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            where = f"{path}:{lineno}"
            tokens = line.replace(",", " ").split()
            if len(tokens) != 8:
                raise FormatError(f"{where}: expected 8 values, got {len(tokens)}")
            v = _floats(tokens, where)
            q = np.array(v[4:8])
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise FormatError(f"{where}: quaternion norm {np.linalg.norm(q):.9g} is not 1")
            stamps.append(v[0])
            poses.append(Pose(quaternion_to_rotation(q), v[1:4]))
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise FormatError(f"{path}: timestamps decrease")
    return Trajectory.from_poses(poses, timestamps=stamps)


def write_tum(path, traj: Trajectory):
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, p in zip(traj.timestamps, traj.poses):
            vals = [ts, *p.translation, *rotation_to_quaternion(p.rotation)]
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def trajectory_format(path, fmt=None):
    """``kitti`` or ``tum``: explicit ``fmt`` wins, then ``.kitti.txt`` /
    ``.tum.txt`` suffixes, then ``kitti``."""
    if fmt:
        if fmt not in ("kitti", "tum"):
            raise ValueError(f"unknown trajectory format {fmt!r}")
        return fmt
    name = os.path.basename(str(path)).lower()
    if name.endswith(".tum.txt") or name.endswith(".tum"):
        return "tum"
    return "kitti"


def read_trajectory(path, fmt=None) -> Trajectory:
    return read_tum(path) if trajectory_format(path, fmt) == "tum" else read_kitti(path)


def write_trajectory(path, traj, fmt=None):
    if trajectory_format(path, fmt) == "tum":
        write_tum(path, traj)
    else:
        write_kitti(path, traj)


# -- images ----------------------------------------------------------------------

def _netpbm_tokens(data):
    """Header tokens of a netpbm file and the offset where pixel data starts."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise FormatError("truncated netpbm header")
        tokens.append(m.group(2))
        pos = m.end()
    return tokens, pos + 1  # single whitespace byte after maxval


def read_pnm(path):
    """Read an 8-bit PGM/PPM as ``uint8`` (``H x W`` or ``H x W x 3``)."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _netpbm_tokens(data)
    magic = tokens[0].decode()
    try:
        W, H, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise FormatError(f"{path}: bad netpbm header") from None
    if magic not in ("P2", "P3", "P5", "P6"):
        raise FormatError(f"{path}: unsupported netpbm type {magic}")
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    ch = 3 if magic in ("P3", "P6") else 1
    n = W * H * ch
    if magic in ("P5", "P6"):
        pix = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)
    else:
        pix = np.array(data[offset - 1:].split()[:n], dtype=np.int64).astype(np.uint8)
        if len(pix) != n:
            raise FormatError(f"{path}: truncated pixel data")
    img = pix.reshape(H, W, ch) if ch == 3 else pix.reshape(H, W)
    if maxval != 255:
        img = np.round(img.astype(float) * 255.0 / maxval).astype(np.uint8)
    return img


def write_pnm(path, img):
    """Write ``uint8`` (or float in [0,1]) image as binary PGM/PPM."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {a.shape}")
    H, W = a.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{W} {H}\n255\n".encode() + np.ascontiguousarray(a).tobytes())


def read_depth(path):
    d = read_fmap(path)
    if d.shape[2] != 1:
        raise FormatError(f"{path}: depth map must have one channel")
    return d[..., 0].astype(float)


def write_depth(path, depth):
    d = np.asarray(depth, dtype=float)
    write_fmap(path, np.where(np.isfinite(d) & (d > 0), d, 0.0))


# -- direct-correspondence tracks ---------------------------------------------------

@dataclass
class Observation:
    """Keypoint observations of one frame with their track ids."""

    ids: np.ndarray
    rc: np.ndarray
    outlier: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int).reshape(-1)
        self.rc = np.asarray(self.rc, dtype=float).reshape(-1, 2)
        self.outlier = np.asarray(self.outlier, dtype=bool).reshape(-1)


def read_tracks(path) -> Observation:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'id row col is_outlier'")
            rows.append(_floats(tokens, f"{path}:{lineno}"))
    a = np.array(rows).reshape(-1, 4)
    return Observation(a[:, 0].astype(int), a[:, 1:3], a[:, 3] != 0)


def write_tracks(path, obs: Observation):
    with open(path, "w") as f:
        f.write("# track_id row col is_outlier\n")
        for i, (r, c), o in zip(obs.ids, obs.rc, obs.outlier):
            f.write(f"{i} {r:.17g} {c:.17g} {int(o)}\n")


# -- manifest ------------------------------------------------------------------------

FRAME_COLUMNS = ("timestamp", "image", "depth", "coarse", "fine", "tracks")


@dataclass
class FrameEntry:
    index: int
    timestamp: float
    image: str | None = None
    depth: str | None = None
    coarse: str | None = None
    fine: str | None = None
    tracks: str | None = None


@dataclass
class SequenceManifest:
    intrinsics: CameraIntrinsics
    frames: list
    groundtruth: str | None = None
    groundtruth_format: str = "kitti"
    body_to_camera: Pose | None = None
    base_dir: str = "."
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise FormatError("manifest timestamps must be nondecreasing")
        for col in FRAME_COLUMNS[1:]:
            have = [getattr(f, col) is not None for f in self.frames]
            if any(have) and not all(have):
                raise FormatError(f"manifest column {col!r} is only partially filled")

    def path(self, rel):
        return None if rel is None else os.path.join(self.base_dir, rel)

    def load_groundtruth(self) -> Trajectory | None:
        if self.groundtruth is None:
            return None
        gt = read_trajectory(self.path(self.groundtruth), self.groundtruth_format)
        if self.body_to_camera is not None:
            # world_from_camera = world_from_body @ body_from_camera
            T = self.body_to_camera
            gt = Trajectory.from_poses([p @ T for p in gt.poses],
                                       gt.timestamps if gt.has_timestamps else None)
        return gt


def read_manifest(path) -> SequenceManifest:
    sections = {"camera": {}, "sequence": {}}
    header, rows = None, []
    section = None
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            m = re.fullmatch(r"\[(\w+)\]", line)
            if m:
                section = m.group(1)
                if section not in ("camera", "sequence", "frames"):
                    raise FormatError(f"{where}: unknown section [{section}]")
                continue
            if section is None:
                raise FormatError(f"{where}: entry outside a section")
            if section == "frames":
                tokens = line.split()
                if header is None:
                    header = tokens
                    unknown = set(header) - set(FRAME_COLUMNS)
                    if "timestamp" not in header or unknown:
                        raise FormatError(f"{where}: bad frame header {header}")
                    continue
                if len(tokens) != len(header):
                    raise FormatError(f"{where}: expected {len(header)} columns")
                rows.append((where, tokens))
            else:
                if "=" not in line:
                    raise FormatError(f"{where}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                sections[section][key] = value

    cam = sections["camera"]
    try:
        intr = CameraIntrinsics(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]),
                                float(cam["cy"]), int(cam["width"]), int(cam["height"]))
    except KeyError as exc:
        raise FormatError(f"{path}: [camera] lacks {exc}") from None

    frames = []
    for k, (where, tokens) in enumerate(rows):
        entry = dict(zip(header, tokens))
        ts = _floats([entry.pop("timestamp")], where)[0]
        entry = {c: (None if v == "-" else v) for c, v in entry.items()}
        frames.append(FrameEntry(k, ts, **entry))

    seq = dict(sections["sequence"])
    b2c = seq.pop("body_to_camera", None)
    if b2c is not None:
        M = np.array(_floats(b2c.split(), f"{path}: body_to_camera"))
        if M.size != 12:
            raise FormatError(f"{path}: body_to_camera needs 12 values")
        M = M.reshape(3, 4)
        b2c = _rigid(M[:, :3], M[:, 3], f"{path}: body_to_camera")
    return SequenceManifest(
        intrinsics=intr, frames=frames,
        groundtruth=seq.pop("groundtruth", None),
        groundtruth_format=seq.pop("groundtruth_format", "kitti"),
        body_to_camera=b2c,
        base_dir=os.path.dirname(os.path.abspath(path)),
        extra=seq)


def write_manifest(path, manifest: SequenceManifest):
    k = manifest.intrinsics
    lines = ["[camera]", f"fx = {k.fx:.17g}", f"fy = {k.fy:.17g}", f"cx = {k.cx:.17g}",
             f"cy = {k.cy:.17g}", f"width = {k.width}", f"height = {k.height}", "",
             "[sequence]"]
    if manifest.groundtruth is not None:
        lines += [f"groundtruth = {manifest.groundtruth}",
                  f"groundtruth_format = {manifest.groundtruth_format}"]
    if manifest.body_to_camera is not None:
        M = manifest.body_to_camera.matrix()[:3]
        lines.append("body_to_camera = " + " ".join(f"{v:.17g}" for v in M.ravel()))
    lines += [f"{key} = {value}" for key, value in manifest.extra.items()]
    cols = ["timestamp"] + [c for c in FRAME_COLUMNS[1:]
                            if any(getattr(f, c) is not None for f in manifest.frames)]
    lines += ["", "[frames]", " ".join(cols)]
    for fr in manifest.frames:
        vals = [f"{fr.timestamp:.9f}"] + [getattr(fr, c) or "-" for c in cols[1:]]
        lines.append(" ".join(vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
