from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses.

    ``keyframe`` and ``tracked`` flags are only meaningful for estimated
    trajectories; loaded ground truth leaves them at their defaults.
    """

    frame_ids: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    keyframe: list = field(default_factory=list)
    tracked: list = field(default_factory=list)
    has_timestamps: bool = True

    def append(self, frame_id, timestamp, pose: Pose, keyframe=False, tracked=True):
        if self.frame_ids and frame_id <= self.frame_ids[-1]:
            raise ValueError(f"frame ids must increase ({frame_id} after {self.frame_ids[-1]})")
        self.frame_ids.append(int(frame_id))
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)
        self.keyframe.append(bool(keyframe))
        self.tracked.append(bool(tracked))

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def rotations(self):
        return np.array([p.rotation for p in self.poses]).reshape(-1, 3, 3)

    def pose_by_id(self, frame_id):
        return self.poses[self.frame_ids.index(frame_id)]

    def path_length(self):
        p = self.positions()
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0

    def transformed(self, T: Pose):
        """Trajectory with every pose left-multiplied by ``T`` (a change of world frame)."""
        out = Trajectory(has_timestamps=self.has_timestamps)
        for i, p in enumerate(self.poses):
            moved = T @ p
            # a similarity moves positions and orientations; keep poses rigid
            out.append(self.frame_ids[i], self.timestamps[i],
                       Pose(moved.rotation, moved.translation),
                       self.keyframe[i], self.tracked[i])
        return out

    @classmethod
    def from_poses(cls, poses, timestamps=None, frame_ids=None):
        traj = cls(has_timestamps=timestamps is not None)
        n = len(poses)
        ids = range(n) if frame_ids is None else frame_ids
        ts = range(n) if timestamps is None else timestamps
        for i, t, p in zip(ids, ts, poses):
            traj.append(i, t, p)
        return traj
