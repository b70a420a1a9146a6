import io
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from ltmvo.geom import SE3
from ltmvo.trajectory import (
    PoseFileError,
    Trajectory,
    format_kitti_poses,
    parse_kitti_pose_line,
    parse_kitti_poses,
    write_kitti_poses,
)


def random_traj(seed, n=20):
    rng = np.random.default_rng(seed)
    rots = Rotation.random(n, random_state=seed).as_matrix()
    return Trajectory([SE3(r, rng.normal(size=3) * 100) for r in rots])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_kitti_round_trip(seed):
    traj = random_traj(seed)
    back = parse_kitti_poses(io.StringIO(format_kitti_poses(traj)))
    assert np.abs(back.matrices() - traj.matrices()).max() < 1e-9


def test_round_trip_through_file(tmp_path):
    traj = random_traj(1)
    write_kitti_poses(traj, tmp_path / "p.txt")
    text = (tmp_path / "p.txt").read_text()
    assert len(text.splitlines()) == 20 and all(len(l.split()) == 12 for l in text.splitlines())
    assert np.allclose(parse_kitti_poses(tmp_path / "p.txt").matrices(), traj.matrices(), atol=1e-12)


def test_parse_errors_carry_line_numbers():
    good = " ".join(["1", "0", "0", "0", "0", "1", "0", "0", "0", "0", "1", "0"])
    with pytest.raises(PoseFileError, match="line 2"):
        parse_kitti_poses(io.StringIO(good + "\n1 2 3\n"))
    with pytest.raises(PoseFileError, match="line 1"):
        parse_kitti_pose_line("1 0 0 0 0 1 0 0 0 0 1 x", 1)
    with pytest.raises(PoseFileError, match="orthonormal"):
        parse_kitti_pose_line("2 0 0 0 0 1 0 0 0 0 1 0", 3)
    with pytest.raises(PoseFileError):
        parse_kitti_pose_line("-1 0 0 0 0 1 0 0 0 0 1 0", 3)  # reflection
    with pytest.raises(PoseFileError, match="non-finite"):
        parse_kitti_pose_line("nan 0 0 0 0 1 0 0 0 0 1 0", 4)


def test_small_drift_is_renormalized(caplog):
    r = np.eye(3) + 1e-5 * np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
    line = " ".join(f"{v:.12f}" for v in np.hstack([r, np.zeros((3, 1))]).ravel())
    with caplog.at_level(logging.WARNING):
        pose = parse_kitti_pose_line(line, 7)
    assert pose.orthonormality_error() < 1e-12
    assert "line 7" in caplog.text


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory([SE3.identity()] * 2, [3, 3])
    with pytest.raises(ValueError):
        Trajectory([SE3.identity()] * 2, [1])


def test_relative_and_from_relative():
    traj = random_traj(2)
    steps = [traj.relative(t + 1, t) for t in range(len(traj) - 1)]  # T_{t -> t+1}
    rebuilt = Trajectory.from_relative(steps)
    anchored = [traj[0].inverse() @ p for p in traj.poses]
    assert all(a.allclose(b, 1e-8) for a, b in zip(rebuilt.poses, anchored))


def test_matched_and_path_lengths():
    a = Trajectory([SE3.from_translation([i, 0, 0]) for i in range(5)], [0, 1, 2, 3, 4])
    b = Trajectory([SE3.from_translation([0, i, 0]) for i in range(3)], [1, 3, 9])
    ma, mb = a.matched(b)
    assert ma.indices == mb.indices == [1, 3]
    assert np.allclose(a.path_lengths(), [0, 1, 2, 3, 4])
