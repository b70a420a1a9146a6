"""Trajectory alignment and odometry / depth metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import SE3
from .trajectory import Trajectory

KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
ALIGN_MODES = ("sim3", "se3", "none")


class AlignmentError(ValueError):
    pass


@dataclass
class Alignment:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, traj: Trajectory) -> Trajectory:
        poses = [
            SE3(self.rotation @ p.rotation, self.scale * self.rotation @ p.translation + self.translation)
            for p in traj.poses
        ]
        return Trajectory(poses, list(traj.indices))


def _check_mode(mode: str) -> str:
    mode = mode.lower()
    if mode not in ALIGN_MODES:
        raise ValueError(f"unknown alignment mode {mode!r}; expected one of {ALIGN_MODES}")
    return mode


def umeyama_points(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Alignment:
    """Least-squares ``s, R, t`` with ``dst ~ s R src + t`` (closed form, determinant-corrected)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise AlignmentError(f"point sets must both be (n, 3), got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise AlignmentError(f"alignment needs at least 3 point pairs, got {n}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / n
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise AlignmentError("degenerate configuration (stationary or collinear positions)")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = float((d * sign).sum() / var_s) if with_scale else 1.0
    return Alignment(scale, rot, mu_d - scale * rot @ mu_s)


def umeyama_align(est: Trajectory, gt: Trajectory, mode: str = "sim3"):
    """Align ``est`` onto ``gt`` by positions; returns ``(aligned, s, R, t)``."""
    mode = _check_mode(mode)
    if list(est.indices) != list(gt.indices):
        raise AlignmentError("trajectories must share frame indices (use Trajectory.matched)")
    if mode == "none":
        return est, 1.0, np.eye(3), np.zeros(3)
    al = umeyama_points(est.positions(), gt.positions(), with_scale=(mode == "sim3"))
    return al.apply(est), al.scale, al.rotation, al.translation


def ate_rmse(est: Trajectory, gt: Trajectory, mode: str = "sim3") -> float:
    """RMSE of position differences after alignment."""
    aligned = umeyama_align(est, gt, mode)[0]
    diff = aligned.positions() - gt.positions()
    return float(np.sqrt((diff**2).sum(1).mean()))


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians, accurate near zero and near pi."""
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return math.atan2(0.5 * np.linalg.norm(skew), 0.5 * (np.trace(r) - 1.0))


@dataclass
class RelErrors:
    trans_pct: float
    rot_deg_per_m: float
    per_length: dict = field(default_factory=dict)  # L -> (trans %, rot deg/m, count)


def kitti_rel_errors(
    est: Trajectory,
    gt: Trajectory,
    lengths=KITTI_LENGTHS,
    length_scale: float = 1.0,
    align: str = "sim3",
) -> RelErrors:
    """Relative errors over every start frame and every subsequence length.

    The end frame is the first one whose accumulated ground-truth path length
    from the start reaches ``L * length_scale``.  With ``align="sim3"`` the
    estimate is first rescaled by the similarity-alignment scale.
    """
    align = _check_mode(align)
    if list(est.indices) != list(gt.indices):
        raise AlignmentError("trajectories must share frame indices")
    est_m = est.matrices()
    if align == "sim3":
        scale = umeyama_align(est, gt, "sim3")[1]
        est_m = est_m.copy()
        est_m[:, :3, 3] *= scale
    gt_m = gt.matrices()
    dist = gt.path_lengths()
    n = len(gt)
    inv_gt = np.linalg.inv(gt_m)
    inv_est = np.linalg.inv(est_m)
    per_length = {}
    all_t, all_r = [], []
    for base in lengths:
        length = base * length_scale
        ends = np.searchsorted(dist, dist + length, side="left")
        errs_t, errs_r = [], []
        for i in range(n):
            j = ends[i]
            if j >= n:
                continue
            rel_gt = inv_gt[i] @ gt_m[j]
            rel_est = inv_est[i] @ est_m[j]
            err = np.linalg.inv(rel_gt) @ rel_est
            errs_t.append(np.linalg.norm(err[:3, 3]) / length)
            errs_r.append(math.degrees(rotation_angle(err[:3, :3])) / length)
        if errs_t:
            per_length[base] = (100.0 * float(np.mean(errs_t)), float(np.mean(errs_r)), len(errs_t))
            all_t.extend(errs_t)
            all_r.extend(errs_r)
    if not per_length:
        raise ValueError("trajectory too short for every subsequence length")
    return RelErrors(100.0 * float(np.mean(all_t)), float(np.mean(all_r)), per_length)


@dataclass
class SnippetATE:
    mean: float
    std: float
    windows: int
    skipped: int


def snippet_ate(est: Trajectory, gt: Trajectory, n: int = 5) -> SnippetATE:
    """Mean and std of SIM3-aligned ATE over every window of ``n`` consecutive frames."""
    if len(gt) < n or len(est) != len(gt):
        raise ValueError(f"need two matched trajectories of at least {n} poses")
    pe, pg = est.positions(), gt.positions()
    errs, skipped = [], 0
    for i in range(len(gt) - n + 1):
        try:
            al = umeyama_points(pe[i : i + n], pg[i : i + n])
        except AlignmentError:
            skipped += 1
            continue
        moved = al.scale * pe[i : i + n] @ al.rotation.T + al.translation
        errs.append(float(np.sqrt(((moved - pg[i : i + n]) ** 2).sum(1).mean())))
    if not errs:
        return SnippetATE(float("nan"), float("nan"), 0, skipped)
    return SnippetATE(float(np.mean(errs)), float(np.std(errs)), len(errs), skipped)


DEPTH_KEYS = ("abs_rel", "sq_rel", "rmse", "log_rmse", "a1", "a2", "a3")


def depth_metrics(pred, gt, median_scaling: bool = True, max_depth: float | None = None) -> dict:
    """Seven standard single-view depth metrics averaged over frames."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    rows = []
    for p, g in zip(pred, gt):
        valid = np.isfinite(g) & (g > 0) & np.isfinite(p) & (p > 0)
        if max_depth is not None:
            valid &= g <= max_depth
        if not valid.any():
            continue
        p, g = p[valid], g[valid]
        if median_scaling:
            p = p * np.median(g) / np.median(p)
        ratio = np.maximum(p / g, g / p)
        rows.append(
            (
                np.mean(np.abs(p - g) / g),
                np.mean((p - g) ** 2 / g),
                np.sqrt(np.mean((p - g) ** 2)),
                np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)),
                np.mean(ratio < 1.25),
                np.mean(ratio < 1.25**2),
                np.mean(ratio < 1.25**3),
            )
        )
    if not rows:
        raise ValueError("no valid depth pixels")
    return dict(zip(DEPTH_KEYS, map(float, np.mean(rows, axis=0))))


@dataclass
class MetricsReport:
    ate_rmse: float
    rel_trans: float | None
    rel_rot: float | None
    alignment: str
    per_length: dict = field(default_factory=dict)
    snippet: SnippetATE | None = None
    depth: dict | None = None
    frames: int = 0

    def to_dict(self) -> dict:
        out = {"frames": self.frames, "alignment": self.alignment, "ate_rmse": self.ate_rmse}
        out["rel_trans"] = self.rel_trans
        out["rel_rot"] = self.rel_rot
        for length, (t, r, c) in sorted(self.per_length.items()):
            out[f"rel_trans_{length}"] = t
            out[f"rel_rot_{length}"] = r
            out[f"count_{length}"] = c
        if self.snippet is not None:
            out["snippet_ate_mean"] = self.snippet.mean
            out["snippet_ate_std"] = self.snippet.std
            out["snippet_windows"] = self.snippet.windows
            out["snippet_skipped"] = self.snippet.skipped
        if self.depth:
            out.update({f"depth_{k}": v for k, v in self.depth.items()})
        return out

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "na"
            return f"{v:.9g}" if isinstance(v, float) else str(v)

        return "".join(f"{k}={fmt(v)}\n" for k, v in self.to_dict().items())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["length", "rel_trans_pct", "rel_rot_deg_per_m", "count"])
        for length, (t, r, c) in sorted(self.per_length.items()):
            writer.writerow([length, f"{t:.9g}", f"{r:.9g}", c])
        return buf.getvalue()


def evaluate(
    est: Trajectory,
    gt: Trajectory,
    align: str = "sim3",
    length_scale: float = 1.0,
    snippet_len: int = 5,
    pred_depths=None,
    gt_depths=None,
) -> MetricsReport:
    """Every trajectory metric (and depth metrics when both depth stacks are given)."""
    est, gt = est.matched(gt)
    if len(gt) == 0:
        raise ValueError("trajectories share no frame indices")
    align = _check_mode(align)
    ate = ate_rmse(est, gt, align)
    try:
        rel = kitti_rel_errors(est, gt, length_scale=length_scale, align=align)
        rel_t, rel_r, per_length = rel.trans_pct, rel.rot_deg_per_m, rel.per_length
    except ValueError:
        rel_t = rel_r = None
        per_length = {}
    snip = snippet_ate(est, gt, snippet_len) if len(gt) >= snippet_len else None
    depth = None
    if pred_depths is not None and gt_depths is not None:
        depth = depth_metrics(pred_depths, gt_depths)
    return MetricsReport(ate, rel_t, rel_r, align, per_length, snip, depth, len(gt))
