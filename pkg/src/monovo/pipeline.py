"""Frame-to-keyframe monocular visual odometry.

Every processed frame is matched against the latest keyframe, the
relative pose is estimated with the weighted eight-point solver and
chained onto the keyframe's absolute pose.  A frame becomes the new
keyframe once the mean pixel displacement of its matches exceeds
``keyframe_threshold``.  Optionally (``refresh_matches > 0``) the
previous frame is promoted to keyframe when the current frame finds too
few matches against a stale keyframe.  Monocular translation is up to scale; its
magnitude comes from ground truth (``scale_source="groundtruth"``) or is
set to 1 (``"unit"``).

Trajectory poses are camera-to-world; the solver returns
current-from-keyframe, so ``world_from_cur = world_from_kf @ inv(cur_from_kf)``.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import descriptor as desc
from .datasets import Observation, read_depth, read_pnm, read_tracks
from .detector import DetectorConfig, KeypointSet, detect
from .geometry import CameraIntrinsics, DegenerateGeometryError, Pose
from .matcher import AttentionMatcher, MatcherWeights, MatchSet, MutualNNMatcher
from .pose_solver import CorrespondenceSet, RelativePose, relative_pose
from .trajectory import Trajectory

log = logging.getLogger(__name__)

# image sizes (H, W) used for the benchmark datasets; informational only
DATASET_RESOLUTIONS = {"tartanair": (476, 630), "euroc": (476, 742), "kitti": (364, 1008)}


@dataclass
class PipelineConfig:
    keyframe_threshold: float = 24.0
    stride: int = 2
    scale_source: str = "groundtruth"    # groundtruth | unit
    provider: str = "classical"          # classical | file | tracks
    matcher: str = "mnn"                 # mnn | attention | tracks
    match_threshold: float = 0.2         # assignment threshold (attention)
    mnn_threshold: float = 0.0           # cosine threshold (mnn)
    normalize_descriptors: bool = False
    weighted_vote: bool = True
    min_matches: int = 8
    refresh_matches: int = 0             # promote the previous frame below this many matches (0: off)
    seed: int = 0
    matcher_weights: str | None = None   # weight manifest path
    fusion_weights: str | None = None    # FMAP path
    # detector
    gaussian_kernel: int = 5
    gaussian_sigma: float = 2.0
    patch_size: int = 14
    nms_radius: int = 8
    grad_threshold: float = 0.01
    top_k: int = 512
    intrinsics: CameraIntrinsics | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.keyframe_threshold <= 0:
            raise ValueError("keyframe threshold must be > 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.scale_source not in ("groundtruth", "unit"):
            raise ValueError(f"unknown scale source {self.scale_source!r}")
        if self.provider not in ("classical", "file", "tracks"):
            raise ValueError(f"unknown descriptor provider {self.provider!r}")
        if self.matcher not in ("mnn", "attention", "tracks"):
            raise ValueError(f"unknown matcher {self.matcher!r}")
        if (self.provider == "tracks") != (self.matcher == "tracks"):
            raise ValueError("the tracks provider and tracks matcher go together")

    @property
    def detector(self):
        return DetectorConfig(self.gaussian_kernel, self.gaussian_sigma, self.patch_size,
                              self.nms_radius, self.grad_threshold, self.top_k)


def _parse_value(name, kind, text):
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    if kind in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def config_keys():
    """Name -> type of every key accepted in a config file."""
    return {f.name: f.type for f in fields(PipelineConfig) if f.name != "intrinsics"}


def read_config(path, overrides=None, **extra) -> PipelineConfig:
    """Flat ``key = value`` file (``#`` comments).  ``overrides`` win."""
    values = {}
    keys = config_keys()
    if path is not None:
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in keys:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                kind = keys[key].split("|")[0].strip()
                values[key] = _parse_value(key, kind, value)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values.update(extra)
    return PipelineConfig(**values)


# -- frames and features -----------------------------------------------------------

@dataclass
class FrameData:
    """Raw inputs of one frame; unused fields stay ``None``."""

    frame_id: int
    timestamp: float
    image: np.ndarray | None = None
    coarse: object = None         # DenseFeatureMap, or FMAP path
    fine: object = None
    observation: Observation | None = None
    depth: np.ndarray | None = None


@dataclass
class Features:
    frame_id: int
    timestamp: float
    keypoints: KeypointSet
    descriptors: desc.DescriptorSet | None


class Frontend:
    """Turns :class:`FrameData` into keypoints and descriptors."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        if config.fusion_weights:
            self.fusion = desc.FusionWeights.load(config.fusion_weights)
        else:
            self.fusion = desc.FusionWeights.random(config.seed)

    def _maps(self, frame: FrameData):
        if self.config.provider == "classical":
            return desc.classical_provider(frame.image)
        coarse, fine = frame.coarse, frame.fine
        if coarse is None or fine is None:
            raise ValueError(f"frame {frame.frame_id}: file provider needs coarse and fine maps")
        if isinstance(coarse, desc.DenseFeatureMap) and isinstance(fine, desc.DenseFeatureMap):
            return coarse, fine
        return desc.file_provider(coarse, fine)

    def __call__(self, frame: FrameData) -> Features:
        cfg = self.config
        if cfg.provider == "tracks":
            obs = frame.observation
            shape = (cfg.intrinsics.height, cfg.intrinsics.width)
            kp = KeypointSet(obs.rc, np.ones(len(obs.ids)), shape, ids=obs.ids)
            return Features(frame.frame_id, frame.timestamp, kp, None)
        kp = detect(frame.image, cfg.detector)
        coarse, fine = self._maps(frame)
        d = desc.describe(kp, coarse, fine, self.fusion, normalize=cfg.normalize_descriptors)
        return Features(frame.frame_id, frame.timestamp, kp, d)


def match_tracks(kp_a: KeypointSet, kp_b: KeypointSet, weights_b=None) -> MatchSet:
    """Match observations that share a track id (direct-correspondence mode)."""
    common, ia, ib = np.intersect1d(kp_a.ids, kp_b.ids, assume_unique=True, return_indices=True)
    w = np.ones(len(ia)) if weights_b is None else np.asarray(weights_b)[ib]
    return MatchSet(ia, ib, np.ones(len(ia)), w, kp_a, kp_b)


def make_matcher(config: PipelineConfig):
    if config.matcher == "tracks":
        return lambda kp_a, da, kp_b, db: match_tracks(kp_a, kp_b)
    if config.matcher == "mnn":
        return MutualNNMatcher(config.mnn_threshold)
    if config.matcher_weights:
        weights = MatcherWeights.load(config.matcher_weights)
    else:
        weights = MatcherWeights.random(config.seed)
    return AttentionMatcher(weights, config.match_threshold)


# -- odometry ------------------------------------------------------------------------

def mean_displacement(m: MatchSet):
    """Mean Euclidean pixel displacement over matched pairs."""
    if len(m) == 0:
        raise ValueError("mean displacement of an empty match set is undefined")
    a, b = m.points()
    return float(np.mean(np.linalg.norm(b - a, axis=1)))


def is_keyframe(displacement, threshold):
    return displacement > threshold


def scale_translation(pose: RelativePose, gt_rel: Pose | None = None, norm=None) -> Pose:
    """Give the unit-direction translation the magnitude of ``gt_rel`` (or ``norm``)."""
    if norm is None:
        norm = float(np.linalg.norm(gt_rel.translation))
    t = np.asarray(pose.translation, dtype=float)
    return Pose(pose.rotation, norm * t / np.linalg.norm(t))


def correspondences(m: MatchSet, intrinsics: CameraIntrinsics) -> CorrespondenceSet:
    a, b = m.points()
    return CorrespondenceSet(intrinsics.normalize(a), intrinsics.normalize(b), m.weights)


@dataclass
class StepResult:
    frame_id: int
    timestamp: float
    pose: Pose
    keyframe: bool
    tracked: bool
    n_matches: int = 0
    displacement: float = float("nan")
    reason: str = ""


class VisualOdometry:
    """Stateful odometry loop; feed frames in order with :meth:`step`."""

    def __init__(self, config: PipelineConfig, groundtruth: Trajectory | None = None,
                 frontend=None, matcher=None):
        if config.intrinsics is None:
            raise ValueError("pipeline config needs camera intrinsics")
        if config.scale_source == "groundtruth" and groundtruth is None:
            raise ValueError("ground-truth scaling requested without a ground-truth trajectory")
        self.config = config
        self.groundtruth = groundtruth
        self.frontend = frontend or Frontend(config)
        self.matcher = matcher or make_matcher(config)
        self.trajectory = Trajectory()
        self.keyframe = None          # Features
        self.keyframe_pose = None     # world_from_kf
        self._last = None             # Features of the last tracked frame
        self.results = []
        if groundtruth is not None:
            self._gt_index = {fid: k for k, fid in enumerate(groundtruth.frame_ids)}

    def _gt_pose(self, frame_id):
        k = self._gt_index.get(frame_id)
        if k is None:
            raise KeyError(f"no ground-truth pose for frame {frame_id}")
        return self.groundtruth.poses[k]

    def _translation_norm(self, kf_id, cur_id):
        if self.config.scale_source == "unit":
            return 1.0
        g_kf, g_cur = self._gt_pose(kf_id), self._gt_pose(cur_id)
        return float(np.linalg.norm(g_cur.translation - g_kf.translation))

    def step(self, frame) -> StepResult:
        feats = frame if isinstance(frame, Features) else self.frontend(frame)
        if self.keyframe is None:
            pose = Pose.identity()
            self.keyframe, self.keyframe_pose = feats, pose
            self._last = feats
            return self._record(StepResult(feats.frame_id, feats.timestamp, pose, True, True))

        prev = self.trajectory.poses[-1]
        m = self.matcher(self.keyframe.keypoints, self.keyframe.descriptors,
                         feats.keypoints, feats.descriptors)
        if (len(m) < self.config.refresh_matches and self._last is not None
                and self._last is not self.keyframe):
            # the keyframe is going stale: promote the last tracked frame
            self.keyframe, self.keyframe_pose = self._last, prev
            self.trajectory.keyframe[-1] = self.results[-1].keyframe = True
            m = self.matcher(self.keyframe.keypoints, self.keyframe.descriptors,
                             feats.keypoints, feats.descriptors)
        if len(m) < self.config.min_matches:
            return self._lost(feats, prev, len(m), float("nan"), f"{len(m)} matches")
        disp = mean_displacement(m)
        try:
            rel = relative_pose(correspondences(m, self.config.intrinsics),
                                weighted_vote=self.config.weighted_vote)
        except (DegenerateGeometryError, ValueError) as exc:
            return self._lost(feats, prev, len(m), disp, str(exc))
        norm = self._translation_norm(self.keyframe.frame_id, feats.frame_id)
        cur_from_kf = scale_translation(rel, norm=norm)
        pose = self.keyframe_pose @ cur_from_kf.inverse()
        kf = is_keyframe(disp, self.config.keyframe_threshold)
        if kf:
            self.keyframe, self.keyframe_pose = feats, pose
        self._last = feats
        return self._record(StepResult(feats.frame_id, feats.timestamp, pose, kf, True, len(m), disp))

    def _lost(self, feats, prev, n_matches, disp, reason):
        # hold the previous pose and re-anchor on this frame, otherwise a
        # stale keyframe would keep failing for the rest of the sequence
        self.keyframe, self.keyframe_pose = feats, prev
        self._last = None
        return self._record(StepResult(feats.frame_id, feats.timestamp, prev, True, False,
                                       n_matches, disp, reason=reason))

    def _record(self, r: StepResult):
        self.trajectory.append(r.frame_id, r.timestamp, r.pose, r.keyframe, r.tracked)
        self.results.append(r)
        if not r.tracked:
            log.info("frame %d untracked: %s", r.frame_id, r.reason)
        return r

    def run(self, frames, threads=1) -> Trajectory:
        """Process ``frames[::stride]``.  With ``threads > 1`` feature
        extraction of upcoming frames runs ahead in a thread pool while pose
        updates stay strictly ordered."""
        frames = itertools.islice(frames, 0, None, self.config.stride)
        if threads <= 1:
            for f in frames:
                self.step(f)
            return self.trajectory
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pending = deque()
            it = frames
            for f in it:
                pending.append(pool.submit(self.frontend, f))
                if len(pending) >= 2 * threads:
                    break
            for f in it:
                self.step(pending.popleft().result())
                pending.append(pool.submit(self.frontend, f))
            while pending:
                self.step(pending.popleft().result())
        return self.trajectory


# -- manifest / synthetic adapters ----------------------------------------------------

def frames_from_manifest(manifest, config: PipelineConfig):
    """Lazy :class:`FrameData` iterator over a :class:`SequenceManifest`."""
    for entry in manifest.frames:
        fd = FrameData(entry.index, entry.timestamp)
        if config.provider == "tracks":
            if entry.tracks is None:
                raise ValueError("tracks provider needs a 'tracks' column in the manifest")
            fd.observation = read_tracks(manifest.path(entry.tracks))
        else:
            if entry.image is None:
                raise ValueError(f"frame {entry.index} has no image")
            fd.image = read_pnm(manifest.path(entry.image))
            if config.provider == "file":
                fd.coarse = manifest.path(entry.coarse)
                fd.fine = manifest.path(entry.fine)
        if entry.depth is not None:
            fd.depth = read_depth(manifest.path(entry.depth))
        yield fd


def frames_from_synthetic(seq, mode="direct"):
    frames = []
    for k, obs in enumerate(seq.observations):
        fd = FrameData(k, seq.groundtruth.timestamps[k], observation=obs)
        if mode == "render":
            fd.image = seq.images[k]
            fd.depth = seq.depths[k]
        frames.append(fd)
    return frames


def run_odometry(frames, config: PipelineConfig, groundtruth=None, threads=1) -> Trajectory:
    return VisualOdometry(config, groundtruth).run(frames, threads=threads)
