"""Trajectories of world-from-camera poses and the KITTI pose text format."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geom import SE3, project_to_rotation

log = logging.getLogger(__name__)

RENORM_TOL = 1e-6
REJECT_TOL = 1e-3


class PoseFileError(ValueError):
    pass


@dataclass
class Trajectory:
    """Ordered ``(frame index, SE3)`` pairs, world-from-camera."""

    poses: list
    indices: list = field(default=None)

    def __post_init__(self):
        if self.indices is None:
            self.indices = list(range(len(self.poses)))
        self.indices = [int(i) for i in self.indices]
        if len(self.indices) != len(self.poses):
            raise ValueError("indices and poses differ in length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> SE3:
        return self.poses[i]

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def matrices(self) -> np.ndarray:
        return np.array([p.matrix() for p in self.poses]).reshape(-1, 4, 4)

    @classmethod
    def from_matrices(cls, mats, indices=None) -> Trajectory:
        return cls([SE3.from_matrix(m) for m in mats], indices)

    @classmethod
    def from_relative(cls, relatives, indices=None) -> Trajectory:
        """Chain ``T_{t -> t+1}`` steps into world-from-camera poses with frame 0 at the origin."""
        poses = [SE3.identity()]
        for rel in relatives:
            poses.append(poses[-1] @ rel.inverse())
        return cls(poses, indices)

    def relative(self, i: int, j: int) -> SE3:
        """Pose of frame ``j`` expressed in camera ``i``."""
        return self.poses[i].inverse() @ self.poses[j]

    def path_lengths(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.positions(), axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def matched(self, other: Trajectory):
        """Restrict both trajectories to their shared frame indices."""
        common = sorted(set(self.indices) & set(other.indices))
        a = {i: p for i, p in zip(self.indices, self.poses)}
        b = {i: p for i, p in zip(other.indices, other.poses)}
        return (
            Trajectory([a[i] for i in common], common),
            Trajectory([b[i] for i in common], common),
        )


def parse_kitti_pose_line(line: str, lineno: int = 0) -> SE3:
    parts = line.split()
    if len(parts) != 12:
        raise PoseFileError(f"line {lineno}: expected 12 values, found {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise PoseFileError(f"line {lineno}: {exc}") from None
    if not np.all(np.isfinite(vals)):
        raise PoseFileError(f"line {lineno}: non-finite value")
    m = vals.reshape(3, 4)
    rot = m[:, :3]
    drift = np.linalg.norm(rot.T @ rot - np.eye(3))
    if drift > REJECT_TOL or np.linalg.det(rot) <= 0:
        raise PoseFileError(f"line {lineno}: rotation is not orthonormal (drift {drift:.3g})")
    if drift > RENORM_TOL:
        log.warning("pose line %d re-orthonormalized (drift %.3g)", lineno, drift)
        rot = project_to_rotation(rot)
    return SE3(rot, m[:, 3])


def parse_kitti_poses(source) -> Trajectory:
    """Read a KITTI pose file (path or open text handle): 12 row-major floats per line."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="ascii") as fh:
            text = fh.read()
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        poses.append(parse_kitti_pose_line(line, lineno))
    return Trajectory(poses)


def format_kitti_poses(traj: Trajectory) -> str:
    lines = []
    for pose in traj.poses:
        m = pose.matrix()[:3].reshape(-1)
        lines.append(" ".join(f"{v:.17e}" for v in m))
    return "\n".join(lines) + ("\n" if lines else "")


def write_kitti_poses(traj: Trajectory, target) -> None:
    text = format_kitti_poses(traj)
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
