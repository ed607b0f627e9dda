"""Synthetic scenes and sequences with exact ground truth.

A scene is a random point cloud around a smooth forward-moving camera
path.  Sequences come in two modes: ``direct`` emits per-frame keypoint
observations with track ids (bypassing detection), ``render`` splats each
point as an oriented derivative-of-Gaussian blob into a grey image so the
real detector and descriptors can run, and also renders a depth map.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .datasets import FrameEntry, Observation, SequenceManifest, write_depth, write_manifest, \
    write_pnm, write_tracks, write_trajectory
from .geometry import CameraIntrinsics, Pose, exp_rotation, rot_y
from .trajectory import Trajectory

DEFAULT_INTRINSICS = CameraIntrinsics(fx=240.0, fy=240.0, cx=159.5, cy=119.5, width=320, height=240)


@dataclass
class SyntheticScene:
    points: np.ndarray     # (N, 3) world coordinates, meters
    poses: list            # camera-to-world Pose per frame
    intrinsics: CameraIntrinsics
    pixel_noise: float = 0.0
    outlier_fraction: float = 0.0
    albedo: np.ndarray | None = None  # (N,) in [0, 1], render mode
    radius: np.ndarray | None = None  # (N,) blob radius in meters, render mode
    orientation: np.ndarray | None = None  # (N,) dipole angle in the image, rad
    frame_rate: float = 10.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier fraction must be in [0, 1)")
        if self.pixel_noise < 0:
            raise ValueError("pixel noise must be >= 0")


def make_scene(seed=0, n_frames=50, path_length=20.0, n_points=1000,
               intrinsics=DEFAULT_INTRINSICS, pixel_noise=0.0, outlier_fraction=0.0,
               view="forward", yaw_amplitude=0.15, lateral_amplitude=1.0,
               blob_radius=(0.2, 0.5), tunnel_radius=(8.0, 20.0), lookahead=40.0):
    """Random point scene around a smooth camera path of ``path_length`` m.

    ``view="side"``: the camera travels along +x looking along +z at a slab
    of points 6-20 m away (strong parallax, image motion close to a shift).
    ``view="forward"``: the camera drives along +z through a flattened
    tunnel of points 8-20 m from the axis.  Both paths wiggle sideways by
    ``lateral_amplitude`` m and yaw by up to ``yaw_amplitude`` rad.
    """
    if view not in ("side", "forward"):
        raise ValueError(f"unknown view {view!r}")
    rng = np.random.default_rng(seed)
    s = np.linspace(0.0, 1.0, n_frames)
    along = path_length * s
    wiggle = lateral_amplitude * np.sin(2 * np.pi * s)
    bob = 0.1 * np.sin(4 * np.pi * s)
    yaw = yaw_amplitude * np.sin(2 * np.pi * s + 0.5)
    poses = []
    for k in range(n_frames):
        R = rot_y(yaw[k]) @ exp_rotation([0.02 * np.sin(3 * np.pi * s[k]), 0.0,
                                          0.01 * np.cos(np.pi * s[k])])
        t = [along[k], bob[k], wiggle[k]] if view == "side" else [wiggle[k], bob[k], along[k]]
        poses.append(Pose(R, t))
    if view == "side":
        pts = np.column_stack([rng.uniform(-12.0, path_length + 12.0, n_points),
                               rng.uniform(-7.0, 7.0, n_points),
                               rng.uniform(6.0, 20.0, n_points)])
    else:
        phi = rng.uniform(0.0, 2 * np.pi, n_points)
        r = rng.uniform(*tunnel_radius, n_points)
        pts = np.column_stack([r * np.cos(phi), 0.6 * r * np.sin(phi),
                               rng.uniform(-5.0, path_length + lookahead, n_points)])
    return SyntheticScene(pts, poses, intrinsics, pixel_noise, outlier_fraction,
                          albedo=rng.uniform(0.3, 1.0, n_points),
                          radius=rng.uniform(*blob_radius, n_points),
                          orientation=rng.uniform(0.0, 2 * np.pi, n_points))


def visible(scene: SyntheticScene, k, margin=2.0, min_depth=1.0, max_depth=50.0):
    """Indices of points observed in frame ``k`` and their camera-frame coordinates."""
    Xc = scene.poses[k].inverse().apply(scene.points)
    z = Xc[:, 2]
    ok = (z > min_depth) & (z < max_depth)
    K = scene.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        r = K.fy * Xc[:, 1] / z + K.cy
        c = K.fx * Xc[:, 0] / z + K.cx
    ok &= (r >= margin) & (r <= K.height - 1 - margin) & (c >= margin) & (c <= K.width - 1 - margin)
    idx = np.flatnonzero(ok)
    return idx, Xc[idx]


@dataclass
class SyntheticSequence:
    scene: SyntheticScene
    groundtruth: Trajectory
    observations: list          # Observation per frame (direct mode)
    images: list | None = None  # float (H, W) in [0, 1] (render mode)
    depths: list | None = None  # (H, W) meters, 0 where undefined

    @property
    def intrinsics(self):
        return self.scene.intrinsics


def _observe(scene, k, rng):
    idx, Xc = visible(scene, k)
    K = scene.intrinsics
    rc = np.column_stack([K.fy * Xc[:, 1] / Xc[:, 2] + K.cy, K.fx * Xc[:, 0] / Xc[:, 2] + K.cx])
    if scene.pixel_noise > 0:
        rc = rc + rng.normal(0.0, scene.pixel_noise, rc.shape)
    outlier = rng.random(len(idx)) < scene.outlier_fraction
    n_out = int(outlier.sum())
    rc[outlier] = np.column_stack([rng.uniform(0, K.height - 1, n_out),
                                   rng.uniform(0, K.width - 1, n_out)])
    rc = np.clip(rc, 0.0, [K.height - 1, K.width - 1])
    return Observation(idx, rc, outlier)


def render(scene: SyntheticScene, k, image_noise=0.0, rng=None, background=0.5):
    """Splat visible points as oriented derivative-of-Gaussian blobs.

    A dipole has a single gradient-magnitude peak at its centre (a plain
    Gaussian peaks on a ring), so the gradient detector localizes it to the
    pixel.  Blobs are added on a grey background; depth is written near
    over far on each blob footprint.  Returns ``(image, depth)``.
    """
    K = scene.intrinsics
    H, W = K.height, K.width
    img = np.full((H, W), background)
    depth = np.zeros((H, W))
    idx, Xc = visible(scene, k, margin=-3.0)
    order = np.argsort(-Xc[:, 2])
    for n in order:
        X = Xc[n]
        i = idx[n]
        r0 = K.fy * X[1] / X[2] + K.cy
        c0 = K.fx * X[0] / X[2] + K.cx
        sigma = float(np.clip(scene.radius[i] * K.fx / X[2], 0.8, 4.0))
        h = int(np.ceil(3 * sigma)) + 2
        r_lo, r_hi = max(int(np.floor(r0)) - h, 0), min(int(np.ceil(r0)) + h, H - 1)
        c_lo, c_hi = max(int(np.floor(c0)) - h, 0), min(int(np.ceil(c0)) + h, W - 1)
        if r_lo > r_hi or c_lo > c_hi:
            continue
        rr, cc = np.mgrid[r_lo:r_hi + 1, c_lo:c_hi + 1]
        d2 = (rr - r0) ** 2 + (cc - c0) ** 2
        u = ((cc - c0) * np.cos(scene.orientation[i]) + (rr - r0) * np.sin(scene.orientation[i])) / sigma
        # peak value +-albedo/2 at one sigma from the centre
        img[r_lo:r_hi + 1, c_lo:c_hi + 1] += 0.5 * scene.albedo[i] * np.sqrt(np.e) * u * np.exp(-d2 / (2 * sigma * sigma))
        depth[r_lo:r_hi + 1, c_lo:c_hi + 1][d2 <= (3 * sigma + 2) ** 2] = X[2]
    if image_noise > 0:
        img = img + rng.normal(0.0, image_noise, img.shape)
    return np.clip(img, 0.0, 1.0), depth


def generate_sequence(scene: SyntheticScene, seed=0, mode="direct", image_noise=0.0):
    """Deterministic given ``seed``.  ``mode`` is ``direct``, ``render`` or ``both``."""
    if mode not in ("direct", "render", "both"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "direct" and (scene.albedo is None or scene.radius is None):
        raise ValueError("render mode needs per-point albedo and radius")
    rng = np.random.default_rng(seed)
    n = len(scene.poses)
    stamps = [k / scene.frame_rate for k in range(n)]
    gt = Trajectory.from_poses(scene.poses, timestamps=stamps)
    observations = []
    for k in range(n):
        obs = _observe(scene, k, rng)
        if np.count_nonzero(~obs.outlier) < 8:
            raise ValueError(f"frame {k} observes fewer than 8 points")
        observations.append(obs)
    images = depths = None
    if mode != "direct":
        images, depths = [], []
        for k in range(n):
            img, d = render(scene, k, image_noise, rng)
            images.append(img)
            depths.append(d)
    return SyntheticSequence(scene, gt, observations, images, depths)


def save_sequence(seq: SyntheticSequence, directory):
    """Write images, depth maps, tracks, ground truth and a manifest."""
    os.makedirs(directory, exist_ok=True)
    n = len(seq.observations)
    has_img = seq.images is not None
    for sub in (("images", "depth") if has_img else ()) + ("tracks",):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    frames = []
    for k in range(n):
        entry = FrameEntry(k, seq.groundtruth.timestamps[k], tracks=f"tracks/{k:06d}.txt")
        write_tracks(os.path.join(directory, entry.tracks), seq.observations[k])
        if has_img:
            entry.image = f"images/{k:06d}.pgm"
            entry.depth = f"depth/{k:06d}.fmap"
            write_pnm(os.path.join(directory, entry.image), seq.images[k])
            write_depth(os.path.join(directory, entry.depth), seq.depths[k])
        frames.append(entry)
    write_trajectory(os.path.join(directory, "groundtruth.kitti.txt"), seq.groundtruth)
    manifest = SequenceManifest(seq.intrinsics, frames, groundtruth="groundtruth.kitti.txt",
                                groundtruth_format="kitti", base_dir=directory)
    path = os.path.join(directory, "manifest.txt")
    write_manifest(path, manifest)
    return path
