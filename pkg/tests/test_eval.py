import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ltmvo.evaluation import (
    AlignmentError,
    MetricsReport,
    ate_rmse,
    depth_metrics,
    evaluate,
    kitti_rel_errors,
    snippet_ate,
    umeyama_align,
)
from ltmvo.geom import SE3
from ltmvo.trajectory import Trajectory


def random_walk(rng, n=200, step=1.0, turn=0.05):
    poses, pose = [], SE3.identity()
    for _ in range(n):
        poses.append(pose)
        d = SE3(Rotation.from_rotvec(rng.normal(size=3) * turn).as_matrix(), [0, 0, step * rng.uniform(0.5, 1.5)])
        pose = pose @ d
    return Trajectory(poses)


def noisy(traj, rng, sigma=0.02):
    return Trajectory(
        [SE3(p.rotation @ Rotation.from_rotvec(rng.normal(size=3) * sigma).as_matrix(),
             p.translation + rng.normal(size=3) * sigma * 10) for p in traj.poses]
    )


def transform(traj, s, r, t):
    return Trajectory([SE3(r @ p.rotation, s * r @ p.translation + t) for p in traj.poses])


def brute_force_rel(est, gt, lengths, scale=1.0):
    """Naive O(n^2) subsequence search; shares no code with the evaluator."""
    ge = [p.matrix() for p in gt.poses]
    ee = [p.matrix() for p in est.poses]
    pos = [p.translation for p in gt.poses]
    n = len(ge)
    terr, rerr = [], []
    for length in lengths:
        length *= scale
        for i in range(n):
            acc, j = 0.0, i
            while j + 1 < n and acc < length:
                acc += math.dist(pos[j], pos[j + 1])
                j += 1
            if acc < length:
                continue
            dg = np.linalg.solve(ge[i], ge[j])
            de = np.linalg.solve(ee[i], ee[j])
            err = np.linalg.solve(dg, de)
            terr.append(np.linalg.norm(err[:3, 3]) / length)
            rerr.append(np.degrees(Rotation.from_matrix(err[:3, :3]).magnitude()) / length)
    return 100 * np.mean(terr), np.mean(rerr)


def test_rel_errors_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        gt = random_walk(rng)
        est = noisy(gt, rng)
        ours = kitti_rel_errors(est, gt, lengths=(10, 20, 40, 80), align="none")
        ref = brute_force_rel(est, gt, (10, 20, 40, 80))
        assert abs(ours.trans_pct - ref[0]) < 1e-9
        assert abs(ours.rot_deg_per_m - ref[1]) < 1e-9


def test_rel_errors_length_scale():
    rng = np.random.default_rng(1)
    gt = random_walk(rng, 120, step=0.1)
    est = noisy(gt, rng, 0.005)
    ours = kitti_rel_errors(est, gt, length_scale=0.01, align="none")
    ref = brute_force_rel(est, gt, (100, 200, 300, 400, 500, 600, 700, 800), scale=0.01)
    assert abs(ours.trans_pct - ref[0]) < 1e-9
    assert set(ours.per_length) <= {100, 200, 300, 400, 500, 600, 700, 800}


def test_rel_errors_uniform_scale_five_percent():
    rng = np.random.default_rng(2)
    # steps much shorter than the subsequence lengths keep the end-frame overshoot small
    gt = random_walk(rng, 400, step=0.05, turn=0.002)
    est = Trajectory([SE3(p.rotation, 1.05 * p.translation) for p in gt.poses])
    rel = kitti_rel_errors(est, gt, lengths=(5, 10, 15), align="none")
    assert abs(rel.trans_pct - 5.0) < 0.1
    assert rel.rot_deg_per_m < 1e-9
    # with scale alignment the same estimate is perfect
    assert kitti_rel_errors(est, gt, lengths=(5, 10, 15)).trans_pct < 1e-9


def test_rel_errors_zero_and_rigid_invariance():
    rng = np.random.default_rng(3)
    gt = random_walk(rng)
    rel = kitti_rel_errors(gt, gt, lengths=(20, 50))
    assert rel.trans_pct < 1e-9 and rel.rot_deg_per_m < 1e-9
    est = noisy(gt, rng)
    r = Rotation.random(random_state=4).as_matrix()
    a = kitti_rel_errors(est, gt, lengths=(20, 50), align="none")
    b = kitti_rel_errors(transform(est, 1, r, [1, 2, 3]), transform(gt, 1, r, [1, 2, 3]),
                         lengths=(20, 50), align="none")
    assert abs(a.trans_pct - b.trans_pct) < 1e-9 and abs(a.rot_deg_per_m - b.rot_deg_per_m) < 1e-9


def test_rel_errors_too_short():
    gt = random_walk(np.random.default_rng(5), 10)
    with pytest.raises(ValueError):
        kitti_rel_errors(gt, gt)


def test_umeyama_recovers_similarity():
    rng = np.random.default_rng(6)
    for s in (0.3, 1.0, 2.5, 5.0):
        est = random_walk(rng, 50)
        r = Rotation.random(random_state=int(rng.integers(1000))).as_matrix()
        t = rng.normal(size=3) * 10
        gt = transform(est, s, r, t)
        _, s_hat, r_hat, t_hat = umeyama_align(est, gt, "sim3")
        assert abs(s_hat - s) < 1e-6
        assert np.allclose(r_hat, r, atol=1e-6) and np.allclose(t_hat, t, atol=1e-6)


def test_umeyama_identity_and_nesting():
    rng = np.random.default_rng(7)
    gt = random_walk(rng, 40)
    aligned, s, r, t = umeyama_align(gt, gt, "sim3")
    assert abs(s - 1) < 1e-9 and np.allclose(r, np.eye(3), atol=1e-9) and np.allclose(t, 0, atol=1e-9)
    est = noisy(gt, rng, 0.1)
    assert ate_rmse(est, gt, "sim3") <= ate_rmse(est, gt, "se3") + 1e-12


def test_umeyama_degenerate():
    line = Trajectory([SE3.from_translation([i, 0, 0]) for i in range(5)])
    with pytest.raises(AlignmentError):
        umeyama_align(line, line)
    with pytest.raises(AlignmentError):
        umeyama_align(Trajectory(line.poses[:2]), Trajectory(line.poses[:2]))


def test_ate_constant_offset_and_similarity_invariance():
    rng = np.random.default_rng(8)
    gt = random_walk(rng, 60)
    shifted = transform(gt, 1.0, np.eye(3), np.array([3.0, -1.0, 2.0]))
    assert ate_rmse(shifted, gt, "se3") < 1e-9
    assert ate_rmse(shifted, gt, "none") == pytest.approx(math.sqrt(14))
    est = noisy(gt, rng)
    r = Rotation.random(random_state=9).as_matrix()
    a = ate_rmse(est, gt, "sim3")
    b = ate_rmse(transform(est, 3.7, r, [5, 5, 5]), gt, "sim3")
    assert abs(a - b) < 1e-9


def test_snippet_ate():
    rng = np.random.default_rng(10)
    gt = random_walk(rng, 300)
    res = snippet_ate(gt, gt, 5)
    assert res.mean < 1e-9 and res.std < 1e-9 and res.windows == 296
    # slow heading drift: locally accurate, globally far off
    drift = []
    pose = SE3.identity()
    for i in range(len(gt) - 1):
        drift.append(pose)
        d = gt.relative(i, i + 1)
        pose = pose @ SE3(Rotation.from_rotvec([0, 0.004, 0]).as_matrix() @ d.rotation, d.translation)
    drift.append(pose)
    est = Trajectory(drift)
    video = ate_rmse(est, gt, "sim3")
    local = snippet_ate(est, gt, 5).mean
    assert video / local > 10


def test_snippet_ate_skips_degenerate():
    line = Trajectory([SE3.from_translation([i, 0, 0]) for i in range(8)])
    res = snippet_ate(line, line, 5)
    assert res.windows == 0 and res.skipped == 4


def test_depth_metrics_closed_forms():
    rng = np.random.default_rng(11)
    gt = rng.uniform(1, 50, size=(3, 12, 16))
    perfect = depth_metrics(gt, gt)
    assert np.allclose([perfect[k] for k in ("abs_rel", "sq_rel", "rmse", "log_rmse")], 0)
    assert perfect["a1"] == perfect["a2"] == perfect["a3"] == 1
    scaled = depth_metrics(2 * gt, gt)
    assert scaled["abs_rel"] < 1e-12 and scaled["a1"] == 1
    off = depth_metrics(1.3 * gt, gt, median_scaling=False)
    assert abs(off["abs_rel"] - 0.3) < 1e-12
    assert off["a1"] == 0 and off["a2"] == 1
    with pytest.raises(ValueError):
        depth_metrics(np.zeros((4, 4)), np.zeros((4, 4)))


def test_evaluate_report_formats():
    rng = np.random.default_rng(12)
    gt = random_walk(rng, 80, step=0.1)
    rep = evaluate(gt, gt, length_scale=0.01)
    assert isinstance(rep, MetricsReport)
    assert rep.ate_rmse < 1e-9 and rep.rel_trans < 1e-9
    text = rep.to_text()
    assert "ate_rmse=" in text and "alignment=sim3" in text
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "length,rel_trans_pct,rel_rot_deg_per_m,count"
    assert len(rows) == 1 + len(rep.per_length)
    with pytest.raises(ValueError):
        evaluate(gt, gt, align="bogus")
