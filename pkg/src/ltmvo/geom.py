"""Rigid-body geometry: SE(3) arithmetic, pinhole intrinsics and pixel correspondences.

Convention: right-handed camera frame with z forward, x right, y down.  A pose
``T_a_to_b`` maps camera-``a`` coordinates into camera-``b`` coordinates, so a
pixel of frame ``a`` lands in frame ``b`` at ``K T D(p) K^-1 p``.

Numeric pose objects (:class:`SE3`, :class:`Twist`) are float64 numpy.  The
network side works on batched ``(..., 4, 4)`` torch matrices through
:func:`exp_matrix`, :func:`invert_pose` and :func:`correspondence_grid`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Below this angle the exp/log coefficients switch to their series expansions.
SMALL_ANGLE = 1e-2
LOG_ANGLE_CUT = np.pi - 1e-6
_DRIFT_TOL = 1e-12
BORDER_TOL = 1e-6  # pixels; absorbs round-off on the image border


class DomainError(ValueError):
    """Input lies outside the domain where the map is defined."""


def hat(w):
    """Skew-symmetric matrix of a 3-vector (numpy)."""
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def project_to_rotation(m):
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rescaled(self, width: int, height: int, crop=(0.0, 0.0)) -> Intrinsics:
        """Intrinsics after cropping ``crop=(left, top)`` pixels then resizing.

        The size before resizing is recovered from ``self.width - 2*left``.
        """
        left, top = crop
        sx = width / (self.width - 2 * left)
        sy = height / (self.height - 2 * top)
        return Intrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx - left + 0.5) * sx - 0.5,
            cy=(self.cy - top + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class Twist:
    """Axis-angle rotation (radians) plus translation, the 6-DoF tangent vector."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=np.float64).reshape(3))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3))
        if not (np.all(np.isfinite(self.rot)) and np.all(np.isfinite(self.trans))):
            raise ValueError("twist components must be finite")

    @classmethod
    def from_vector(cls, v) -> Twist:
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])


@dataclass(frozen=True, eq=False)
class SE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("SE3 entries must be finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> SE3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> SE3:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> SE3:
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> SE3:
        return se3_inverse(self)

    def __matmul__(self, other: SE3) -> SE3:
        return se3_compose(self, other)

    def apply(self, points) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        return float(np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3)))

    def normalized(self) -> SE3:
        if self.orthonormality_error() > _DRIFT_TOL:
            return SE3(project_to_rotation(self.rotation), self.translation)
        return self

    def allclose(self, other: SE3, atol=1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol))

    def __repr__(self):
        return f"SE3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def se3_compose(a: SE3, b: SE3) -> SE3:
    """``a @ b``: apply ``b`` first, then ``a``."""
    return SE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation).normalized()


def se3_inverse(t: SE3) -> SE3:
    rt = t.rotation.T
    return SE3(rt, -rt @ t.translation).normalized()


def _exp_coefficients(theta2):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) elementwise (torch)."""
    small = theta2 < SMALL_ANGLE**2
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a_big = torch.sin(theta) / theta
    b_big = (1.0 - torch.cos(theta)) / safe2
    c_big = (theta - torch.sin(theta)) / (safe2 * theta)
    t2, t4 = theta2, theta2 * theta2
    a_small = 1.0 - t2 / 6.0 + t4 / 120.0
    b_small = 0.5 - t2 / 24.0 + t4 / 720.0
    c_small = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
    return (
        torch.where(small, a_small, a_big),
        torch.where(small, b_small, b_big),
        torch.where(small, c_small, c_big),
    )


def skew(w: torch.Tensor) -> torch.Tensor:
    """Batched hat operator, ``(..., 3) -> (..., 3, 3)``."""
    zero = torch.zeros_like(w[..., 0])
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    return torch.stack(
        [
            torch.stack([zero, -wz, wy], -1),
            torch.stack([wz, zero, -wx], -1),
            torch.stack([-wy, wx, zero], -1),
        ],
        -2,
    )


def exp_matrix(xi: torch.Tensor) -> torch.Tensor:
    """Differentiable SE(3) exponential of ``(..., 6)`` twists [rot | trans] to ``(..., 4, 4)``."""
    w, v = xi[..., :3], xi[..., 3:]
    theta2 = (w * w).sum(-1)
    a, b, c = _exp_coefficients(theta2)
    a, b, c = a[..., None, None], b[..., None, None], c[..., None, None]
    wx = skew(w)
    wx2 = wx @ wx
    eye = torch.eye(3, dtype=xi.dtype, device=xi.device).expand(wx.shape)
    rot = eye + a * wx + b * wx2
    vmat = eye + b * wx + c * wx2
    trans = (vmat @ v[..., None])[..., 0]
    top = torch.cat([rot, trans[..., None]], -1)
    bottom = torch.zeros(xi.shape[:-1] + (1, 4), dtype=xi.dtype, device=xi.device)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], -2)


def invert_pose(m: torch.Tensor) -> torch.Tensor:
    """Inverse of ``(..., 4, 4)`` rigid transforms."""
    rt = m[..., :3, :3].transpose(-1, -2)
    t = -(rt @ m[..., :3, 3:4])
    top = torch.cat([rt, t], -1)
    return torch.cat([top, m[..., 3:4, :]], -2)


def se3_exp(xi: Twist) -> SE3:
    v = torch.as_tensor(xi.as_vector(), dtype=torch.float64)
    return SE3.from_matrix(exp_matrix(v).numpy())


def se3_log(t: SE3) -> Twist:
    """Inverse of :func:`se3_exp` for rotation angles below ``pi - 1e-6``.

    Angles at or beyond the cut raise :class:`DomainError`; the axis is
    ill-conditioned there and the branch is not handled.
    """
    r = t.rotation
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = np.linalg.norm(vee)
    c = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(s, c)
    if theta >= LOG_ANGLE_CUT:
        raise DomainError(f"rotation angle {theta:.9f} too close to pi for se3_log")
    theta2 = theta * theta
    if theta < SMALL_ANGLE:
        sinc = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        d = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    else:
        sinc = np.sin(theta) / theta
        d = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta2
    w = vee / sinc
    wx = hat(w)
    vinv = np.eye(3) - 0.5 * wx + d * (wx @ wx)
    return Twist(w, vinv @ t.translation)


def pose_tensor(t, dtype=torch.float64) -> torch.Tensor:
    """Accept an :class:`SE3`, a 4x4 array or a tensor; return a 4x4 tensor."""
    if isinstance(t, SE3):
        return torch.as_tensor(t.matrix(), dtype=dtype)
    return torch.as_tensor(t, dtype=dtype) if not torch.is_tensor(t) else t


def pixel_rays(k: Intrinsics, dtype=torch.float64) -> torch.Tensor:
    """Back-projected rays ``K^-1 [u, v, 1]`` with z = 1, shape ``(3, H, W)``."""
    v, u = torch.meshgrid(
        torch.arange(k.height, dtype=dtype), torch.arange(k.width, dtype=dtype), indexing="ij"
    )
    return torch.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, torch.ones_like(u)])


def correspondence_grid(k: Intrinsics, t, depth, min_depth=1e-6):
    """Continuous target coordinates for every source pixel.

    ``t`` maps source-camera coordinates into target-camera coordinates and may
    be an :class:`SE3` or a ``(..., 4, 4)`` tensor; ``depth`` is ``(..., H, W)``.
    Returns ``grid`` of shape ``(..., H, W, 2)`` holding ``(x, y)`` pixel
    coordinates and a boolean ``valid`` mask of shape ``(..., H, W)``.  Pixels
    with non-positive source or projected depth, or whose target falls outside
    ``[0, W-1] x [0, H-1]``, are invalid.
    """
    depth = torch.as_tensor(depth)
    if not torch.is_floating_point(depth):
        depth = depth.to(torch.float64)
    t = pose_tensor(t, dtype=depth.dtype).to(depth.dtype)
    if depth.shape[-2:] != (k.height, k.width):
        raise ValueError(
            f"depth shape {tuple(depth.shape[-2:])} does not match intrinsics {k.height}x{k.width}"
        )
    rays = pixel_rays(k, depth.dtype)
    points = rays * depth.unsqueeze(-3)  # (..., 3, H, W)
    rot = t[..., :3, :3]
    trans = t[..., :3, 3]
    moved = torch.einsum("...ij,...jhw->...ihw", rot, points) + trans[..., :, None, None]
    z = moved[..., 2, :, :]
    front = (z > min_depth) & (depth > 0)
    z_safe = torch.where(front, z, torch.ones_like(z))
    x = k.fx * moved[..., 0, :, :] / z_safe + k.cx
    y = k.fy * moved[..., 1, :, :] / z_safe + k.cy
    e = BORDER_TOL
    inside = (x >= -e) & (x <= k.width - 1 + e) & (y >= -e) & (y <= k.height - 1 + e)
    return torch.stack([x, y], -1), front & inside
