"""Synthetic sequences with exact ground truth, and KITTI-format ingestion.

A synthetic scene is one rigid textured height field ``z = h(x, y)`` seen
by a camera that starts at the world origin looking down +z.  Each frame is
ray cast analytically, so depth and pose ground truth are exact and frames are
photometrically consistent up to the resampling error of the warp.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .geom import SE3, Intrinsics, correspondence_grid
from .imgproc import synthesize_view, write_png
from .trajectory import Trajectory, parse_kitti_poses, write_kitti_poses

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class GeneratorError(RuntimeError):
    pass


@dataclass
class Sequence:
    frames: torch.Tensor  # (T, C, H, W) float32
    intrinsics: Intrinsics
    gt_trajectory: Trajectory | None = None
    gt_depths: torch.Tensor | None = None  # (T, H, W) float32
    name: str = "seq"

    def __post_init__(self):
        t = self.frames.shape[0]
        if self.frames.shape[-2:] != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("frame resolution disagrees with intrinsics")
        if self.gt_trajectory is not None and len(self.gt_trajectory) != t:
            raise ValueError("ground-truth trajectory length differs from frame count")
        if self.gt_depths is not None and self.gt_depths.shape[0] != t:
            raise ValueError("ground-truth depth count differs from frame count")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class SynthConfig:
    frames: int = 97
    width: int = 64
    height: int = 48
    focal_ratio: float = 0.75  # fx = fy = focal_ratio * width
    texture_octaves: int = 1
    texture_cell: float = 2.0  # lattice spacing of the coarsest octave, scene units
    texture_contrast: float = 3.0
    base_depth: float = 6.0
    depth_amplitudes: tuple = (0.8, 0.4, 0.25)
    depth_frequencies: tuple = (0.35, 0.6, 0.9)  # radians per scene unit
    base_velocity: tuple = (0.15, 0.0, 0.0)  # mean per-frame translation, camera sweeps along the surface
    trans_std: tuple = (0.08, 0.04, 0.04)  # stationary std of the velocity deviation, x y z
    rot_std: tuple = (0.003, 0.006, 0.003)  # stationary std of the angular velocity, radians
    turn_std: float = 0.015  # stationary std of the heading rate of the base velocity, radians per frame
    smoothing: float = 0.97  # AR(1) coefficient of the velocity low-pass filter
    min_in_frame: float = 0.9
    seed: int = 0

    def intrinsics(self) -> Intrinsics:
        f = self.focal_ratio * self.width
        return Intrinsics(f, f, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)


# Scene --------------------------------------------------------------------


def _bspline_weights(t):
    t2, t3 = t * t, t * t * t
    return (
        (1 - t) ** 3 / 6,
        (3 * t3 - 6 * t2 + 4) / 6,
        (-3 * t3 + 3 * t2 + 3 * t + 1) / 6,
        t3 / 6,
    )


class ValueNoise:
    """Cubic B-spline value noise on a periodic 256x256 lattice, zero mean.

    B-spline smoothing keeps curvature low relative to slope, which is what
    bounds the error of bilinear resampling.
    """

    def __init__(self, rng: np.random.Generator, period=256):
        self.period = period
        self.table = rng.random((period, period)) - 0.5

    def __call__(self, x, y):
        xi = np.floor(x)
        yi = np.floor(y)
        wx = _bspline_weights(x - xi)
        wy = _bspline_weights(y - yi)
        xi = xi.astype(np.int64)
        yi = yi.astype(np.int64)
        out = np.zeros_like(x)
        for j in range(4):
            rows = (yi + j - 1) % self.period
            acc = np.zeros_like(x)
            for i in range(4):
                acc += wx[i] * self.table[rows, (xi + i - 1) % self.period]
            out += wy[j] * acc
        return out


class Scene:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.base = cfg.base_depth
        self.amps = np.asarray(cfg.depth_amplitudes, dtype=np.float64)
        n = len(self.amps)
        freqs = np.asarray(cfg.depth_frequencies, dtype=np.float64)
        angles = rng.uniform(0, 2 * np.pi, n)
        self.kx = freqs * np.cos(angles)
        self.ky = freqs * np.sin(angles)
        self.phase = rng.uniform(0, 2 * np.pi, n)
        if self.base <= self.amps.sum():
            raise ValueError("base depth must exceed the summed amplitudes to stay positive")
        self.cell = cfg.texture_cell
        self.contrast = cfg.texture_contrast
        self.octaves = cfg.texture_octaves
        self.noise = [[ValueNoise(rng) for _ in range(self.octaves)] for _ in range(3)]
        self.offsets = rng.uniform(0, 256, (3, self.octaves, 2))

    def height(self, x, y):
        arg = x[..., None] * self.kx + y[..., None] * self.ky + self.phase
        return self.base + (self.amps * np.sin(arg)).sum(-1)

    def height_grad(self, x, y):
        arg = x[..., None] * self.kx + y[..., None] * self.ky + self.phase
        c = self.amps * np.cos(arg)
        return (c * self.kx).sum(-1), (c * self.ky).sum(-1)

    def texture(self, x, y):
        chans = []
        for c in range(3):
            val = np.zeros_like(x)
            amp, norm = 1.0, 0.0
            for o in range(self.octaves):
                scale = self.cell / 2**o
                ox, oy = self.offsets[c, o]
                val += amp * self.noise[c][o](x / scale + ox, y / scale + oy)
                norm += amp
                amp *= 0.5
            chans.append(val / norm)
        # smooth contrast stretch; a hard clip would add kinks that bilinear resampling cannot follow
        return 0.5 + 0.5 * np.tanh(self.contrast * np.stack(chans))

    def render(self, k: Intrinsics, pose: SE3, iters=30):
        """Ray cast one frame; returns image (3, H, W) and z-depth (H, W)."""
        v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
        rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], -1)
        d = rays @ pose.rotation.T
        c = pose.translation
        s = (self.base - c[2]) / d[..., 2]
        for _ in range(iters):
            x = c[0] + s * d[..., 0]
            y = c[1] + s * d[..., 1]
            g = c[2] + s * d[..., 2] - self.height(x, y)
            hx, hy = self.height_grad(x, y)
            dg = d[..., 2] - hx * d[..., 0] - hy * d[..., 1]
            s = s - g / dg
        x = c[0] + s * d[..., 0]
        y = c[1] + s * d[..., 1]
        resid = np.abs(c[2] + s * d[..., 2] - self.height(x, y))
        if not np.all(resid < 1e-9) or not np.all(s > 0):
            raise GeneratorError("ray casting did not converge")
        return self.texture(x, y), s


# Camera path ----------------------------------------------------------------


def _euler_to_rotation(a):
    rx, ry, rz = a
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def camera_path(cfg: SynthConfig, rng: np.random.Generator, damping=1.0):
    """Integrate a base velocity plus low-pass filtered deviations into world-from-camera poses."""
    phi = cfg.smoothing
    gain = np.sqrt(1 - phi * phi)
    base = damping * np.asarray(cfg.base_velocity, dtype=np.float64)
    tstd = damping * np.asarray(cfg.trans_std, dtype=np.float64)
    rstd = damping * np.asarray(cfg.rot_std, dtype=np.float64)
    pos, ang = np.zeros(3), np.zeros(3)
    vel, omega = np.zeros(3), np.zeros(3)
    heading, turn = 0.0, 0.0
    poses = [SE3.identity()]
    for _ in range(cfg.frames - 1):
        vel = phi * vel + gain * tstd * rng.standard_normal(3)
        omega = phi * omega + gain * rstd * rng.standard_normal(3)
        turn = phi * turn + gain * damping * cfg.turn_std * rng.standard_normal()
        heading += turn
        c, s = np.cos(heading), np.sin(heading)
        step = np.array([c * base[0] - s * base[1], s * base[0] + c * base[1], base[2]])
        # pull depth and attitude back toward the start so the surface stays in view
        pos = pos + step + vel - np.array([0.0, 0.0, 0.05]) * pos
        ang = ang + omega - 0.05 * ang
        poses.append(SE3(_euler_to_rotation(ang), pos))
    return Trajectory(poses)


def in_frame_fraction(k: Intrinsics, traj: Trajectory, depths: torch.Tensor) -> float:
    worst = 1.0
    for t in range(len(traj) - 1):
        rel = traj.relative(t + 1, t)  # frame t coordinates into frame t+1
        _, valid = correspondence_grid(k, rel, depths[t].double())
        worst = min(worst, float(valid.double().mean()))
    return worst


def consistency_error(seq: Sequence, margin: int = 4) -> float:
    """Worst mean L2 colour error over consecutive pairs when frame t+1 is warped into t."""
    k = seq.intrinsics
    worst = 0.0
    for t in range(len(seq) - 1):
        rel = seq.gt_trajectory.relative(t + 1, t)
        warped, valid = synthesize_view(seq.frames[t + 1].double(), k, rel, seq.gt_depths[t].double())
        err = torch.linalg.vector_norm(warped - seq.frames[t].double(), dim=0)
        inner = torch.zeros_like(valid)
        inner[margin:-margin, margin:-margin] = True
        sel = valid & inner
        if sel.any():
            worst = max(worst, float(err[sel].mean()))
    return worst


def synth_generate(cfg: SynthConfig, check_consistency: bool = True, max_attempts: int = 5) -> Sequence:
    k = cfg.intrinsics()
    damping = 1.0
    for attempt in range(max_attempts):
        rng = np.random.default_rng(cfg.seed)
        scene = Scene(cfg, rng)
        traj = camera_path(cfg, rng, damping)
        images, depths = [], []
        for pose in traj.poses:
            img, depth = scene.render(k, pose)
            images.append(img)
            depths.append(depth)
        frames = torch.from_numpy(np.stack(images)).to(torch.float32)
        depth_t = torch.from_numpy(np.stack(depths)).to(torch.float32)
        if in_frame_fraction(k, traj, depth_t) >= cfg.min_in_frame:
            break
        log.warning("synthetic motion too large (attempt %d); damping", attempt + 1)
        damping *= 0.5
    else:
        raise GeneratorError(f"could not keep {cfg.min_in_frame:.0%} of pixels in frame after {max_attempts} attempts")
    seq = Sequence(frames, k, traj, depth_t, name=f"synth_{cfg.seed}")
    if check_consistency:
        err = consistency_error(seq)
        if err >= 1e-3:
            raise GeneratorError(f"generator self-consistency violated: mean L2 {err:.2e}")
    return seq


# Disk formats ---------------------------------------------------------------


def write_depth(path, depth) -> None:
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(4 * w * h), dtype="<f4").reshape(h, w).astype(np.float32)


def format_calib(k: Intrinsics) -> str:
    p = np.zeros((3, 4))
    p[:3, :3] = k.matrix()
    row = " ".join(f"{v:.12e}" for v in p.reshape(-1))
    return "".join(f"P{i}: {row}\n" for i in range(4))


def parse_calib(path, camera: int = 2):
    """Return ``(fx, fy, cx, cy)`` from the ``P<camera>:`` line of a KITTI calib file."""
    key = f"P{camera}:"
    with open(path, encoding="ascii") as fh:
        for line in fh:
            if line.startswith(key):
                vals = np.array([float(v) for v in line[len(key):].split()])
                if vals.size != 12:
                    raise ValueError(f"{path}: {key} needs 12 values")
                p = vals.reshape(3, 4)
                return p[0, 0], p[1, 1], p[0, 2], p[1, 2]
    raise ValueError(f"{path}: no {key} line")


def save_sequence(seq: Sequence, directory) -> Path:
    """Write PNG frames, calib, KITTI poses and raw depth maps."""
    root = Path(directory)
    (root / "image_2").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_png(root / "image_2" / f"{i:06d}.png", frame)
    (root / "calib.txt").write_text(format_calib(seq.intrinsics), encoding="ascii")
    if seq.gt_trajectory is not None:
        write_kitti_poses(seq.gt_trajectory, root / "poses.txt")
    if seq.gt_depths is not None:
        (root / "depth").mkdir(exist_ok=True)
        for i, d in enumerate(seq.gt_depths):
            write_depth(root / "depth" / f"{i:06d}.bin", d.numpy())
    return root


def _image_dir(root: Path, camera: int) -> Path:
    for cand in (root / f"image_{camera}", root / "image_2", root / "image_0", root):
        if cand.is_dir() and any(p.suffix.lower() in IMAGE_SUFFIXES for p in cand.iterdir()):
            return cand
    raise FileNotFoundError(f"no image files under {root}")


def _center_crop_box(w, h, target_w, target_h):
    """Largest centred box with the target aspect ratio; returns (left, top, right, bottom)."""
    aspect = target_w / target_h
    if w / h > aspect:
        cw, ch = h * aspect, h
    else:
        cw, ch = w, w / aspect
    left, top = (w - cw) / 2, (h - ch) / 2
    return left, top, left + cw, top + ch


def load_kitti_sequence(directory, resolution=None, camera: int = 2, poses_path=None) -> Sequence:
    """Load a KITTI-style sequence directory.

    Expects numbered images (``image_<camera>/`` or the directory itself), a
    ``calib.txt`` and optionally ``poses.txt`` (or ``poses_path``) and
    ``depth/*.bin``.  With ``resolution=(W, H)`` frames are centre-cropped to
    the target aspect ratio and resized, and intrinsics follow.
    """
    root = Path(directory)
    calib = root / "calib.txt"
    if not calib.exists():
        raise FileNotFoundError(f"missing calibration file {calib}")
    img_dir = _image_dir(root, camera)
    files = sorted(
        (p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=lambda p: int(p.stem)
    )
    with PILImage.open(files[0]) as im:
        w0, h0 = im.size
    fx, fy, cx, cy = parse_calib(calib, camera)
    k = Intrinsics(fx, fy, cx, cy, w0, h0)
    box = None
    if resolution is not None and tuple(resolution) != (w0, h0):
        tw, th = resolution
        box = _center_crop_box(w0, h0, tw, th)
        k = k.rescaled(tw, th, crop=(box[0], box[1]))
    frames = []
    for f in files:
        if box is None:
            frames.append(_read_any(f))
        else:
            with PILImage.open(f) as im:
                im = im.convert("RGB").resize((resolution[0], resolution[1]), PILImage.BILINEAR, box=box)
                arr = np.asarray(im, dtype=np.float32) / 255.0
            frames.append(torch.from_numpy(arr).permute(2, 0, 1).contiguous())
    frames = torch.stack(frames)
    traj = None
    ppath = Path(poses_path) if poses_path is not None else root / "poses.txt"
    if ppath.exists():
        traj = parse_kitti_poses(ppath)
        if len(traj) != len(files):
            raise ValueError(f"{ppath} has {len(traj)} poses for {len(files)} frames")
    depths = None
    ddir = root / "depth"
    if ddir.is_dir() and box is None:
        dfiles = sorted(ddir.glob("*.bin"), key=lambda p: int(p.stem))
        if len(dfiles) == len(files):
            depths = torch.from_numpy(np.stack([read_depth(p) for p in dfiles]))
    return Sequence(frames, k, traj, depths, name=root.name)


def _read_any(path) -> torch.Tensor:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def default_synth_config(**overrides) -> SynthConfig:
    return replace(SynthConfig(), **overrides)


def gt_snippet_poses(traj: Trajectory, anchor: int, n: int, dtype=torch.float32):
    """Ground-truth ``T_{t-1 -> t}`` and ``T_{a -> t}`` for the ``n``-frame snippet at ``anchor``.

    Both are ``(n-1, 4, 4)`` tensors; entry ``s`` refers to frame ``anchor+s+1``.
    """
    rel = [traj.relative(t, t - 1).matrix() for t in range(anchor + 1, anchor + n)]
    ab = [traj.relative(t, anchor).matrix() for t in range(anchor + 1, anchor + n)]
    return torch.tensor(np.array(rel), dtype=dtype), torch.tensor(np.array(ab), dtype=dtype)
