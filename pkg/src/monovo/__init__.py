"""Monocular frame-to-keyframe visual odometry with salient keypoints,
fused coarse/fine descriptors, an attention or mutual-NN matcher and a
confidence-weighted eight-point solver."""

from .detector import DetectorConfig, KeypointSet, detect
from .descriptor import DenseFeatureMap, DescriptorSet, FusionWeights, classical_provider, describe, fuse
from .geometry import CameraIntrinsics, DegenerateGeometryError, Pose, compose
from .matcher import AttentionMatcher, MatcherWeights, MatchSet, MutualNNMatcher, assignment, extract_matches
from .metrics import AlignmentMode, ate, kitti_drift, matching_metrics
from .pipeline import PipelineConfig, VisualOdometry, read_config, run_odometry
from .pose_solver import CorrespondenceSet, decompose_and_select, relative_pose, solve_essential
from .trajectory import Trajectory

__version__ = "0.1.0"

__all__ = [
    "AlignmentMode", "AttentionMatcher", "CameraIntrinsics", "CorrespondenceSet", "DegenerateGeometryError",
    "DenseFeatureMap", "DescriptorSet", "DetectorConfig", "FusionWeights", "KeypointSet", "MatchSet",
    "MatcherWeights", "MutualNNMatcher", "PipelineConfig", "Pose", "Trajectory", "VisualOdometry",
    "assignment", "ate", "classical_provider", "compose", "decompose_and_select", "describe", "detect",
    "extract_matches", "fuse", "kitti_drift", "matching_metrics", "read_config", "relative_pose",
    "run_odometry", "solve_essential",
]
