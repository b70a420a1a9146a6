"""Training objectives: photometric, smoothness, anchor, cycle, full and long-range losses.

Poses enter as ``(..., 4, 4)`` tensors so gradients reach the pose heads.
Frames are ``(B, N, C, H, W)``, depths ``(B, N, H, W)`` and per-step poses
``(B, N-1, 4, 4)``.  Index ``t-1`` of a relative-pose tensor holds
``T_{t-1 -> t}``; index ``t-1`` of an absolute-pose tensor holds ``T_{0 -> t}``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .geom import Intrinsics, invert_pose
from .imgproc import erode_mask, image_gradients, ssim_map, synthesize_view

ALPHA = 0.85
LAMBDA_SMOOTH = 0.001
LAMBDA_CYCLE = 0.001


class EmptyMaskWarning(UserWarning):
    """Every pixel of a masked mean was excluded; the mean is reported as 0."""


def masked_mean(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return values.mean()
    count = mask.sum()
    if count == 0:
        warnings.warn("masked mean over an empty pixel set", EmptyMaskWarning, stacklevel=2)
        return values.sum() * 0.0
    return (values * mask.to(values.dtype)).sum() / count


def rho_map(a: torch.Tensor, b: torch.Tensor, alpha: float = ALPHA) -> torch.Tensor:
    """Per-pixel ``alpha * (1 - SSIM)/2 + (1 - alpha) * ||a - b||_2`` (norm over channels)."""
    diff = a - b
    sq = (diff * diff).sum(-3)
    # guard sqrt at 0 so exact matches give 0 with a zero gradient instead of NaN
    nz = sq > 0
    l2 = torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    if alpha == 0:
        return l2
    return alpha * (1 - ssim_map(a, b)) / 2 + (1 - alpha) * l2


def rho(a, b, mask=None, alpha: float = ALPHA):
    """Return the per-pixel map and its mean over ``mask``."""
    m = rho_map(a, b, alpha)
    return m, masked_mean(m, mask)


def _inf_where_invalid(err, valid):
    return torch.where(valid, err, torch.full_like(err, float("inf")))


def _frame_means(values, mask):
    """Masked means per frame over batch and pixels; ``values``/``mask`` are (B, T, H, W)."""
    count = mask.sum(dim=(0, 2, 3))
    if bool((count == 0).any()):
        warnings.warn("masked mean over an empty pixel set", EmptyMaskWarning, stacklevel=3)
    total = (values * mask.to(values.dtype)).sum(dim=(0, 2, 3))
    return total / count.clamp(min=1)


def appearance_loss(frames, depths, rel_poses, k: Intrinsics, alpha: float = ALPHA):
    """Per-pixel minimum reprojection loss with binary auto-masking.

    For each interior frame t the sources t-1 and t+1 are warped into t.  A
    pixel survives when its best warped error is strictly below the best
    unwarped error and at least one warp is valid.  Per-frame masked means are
    averaged over the ``N-2`` interior frames.
    """
    n = frames.shape[1]
    if n < 3:
        raise ValueError(f"appearance_loss needs at least 3 frames, got {n}")
    target = frames[:, 1:-1]
    sources = torch.stack([frames[:, :-2], frames[:, 2:]])  # (2, B, N-2, C, H, W)
    poses = torch.stack([invert_pose(rel_poses[:, :-1]), rel_poses[:, 1:]])  # T_{t->t-1}, T_{t->t+1}
    warped, valid = synthesize_view(sources, k, poses, depths[:, 1:-1].expand((2,) + target.shape[:2] + depths.shape[-2:]))
    valid = erode_mask(valid)
    warped_err = _inf_where_invalid(rho_map(target.expand_as(warped), warped, alpha), valid)
    with torch.no_grad():
        ident_err = rho_map(target.expand_as(sources), sources, alpha)
    best_warped = warped_err.min(0).values
    best_ident = ident_err.min(0).values
    keep = torch.isfinite(best_warped) & (best_warped < best_ident)
    safe = torch.where(keep, best_warped, torch.zeros_like(best_warped))
    return _frame_means(safe, keep).mean()


def smoothness_loss(depth: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    """Edge-aware smoothness of mean-normalized disparity."""
    disp = 1.0 / depth
    disp = disp / disp.mean(dim=(-2, -1), keepdim=True)
    dx, dy = image_gradients(disp)
    ix, iy = image_gradients(img)
    wx = torch.exp(-ix.abs().mean(-3))
    wy = torch.exp(-iy.abs().mean(-3))
    return (dx.abs() * wx + dy.abs() * wy).mean()


def abs_appearance_loss(frames, depths, abs_poses, k: Intrinsics, alpha: float = ALPHA):
    """Mean over t of ``rho(I_0, I_t warped into frame 0)``.

    Frame t is sampled at the projection of frame-0 pixels through the anchor
    depth ``D_0`` and ``T_{0 -> t}``.  Pixels whose SSIM window touches an
    invalid sample are excluded.
    """
    n = frames.shape[1]
    if abs_poses.shape[1] != n - 1:
        raise ValueError(f"expected {n - 1} absolute poses, got {abs_poses.shape[1]}")
    anchor = frames[:, :1].expand_as(frames[:, 1:])
    depth0 = depths[:, :1].expand(depths[:, 1:].shape)
    warped, valid = synthesize_view(frames[:, 1:], k, abs_poses, depth0)
    err = rho_map(anchor, warped, alpha)
    return _frame_means(err, erode_mask(valid)).mean()


def cycle_loss(rel_poses, abs_poses):
    """Mean squared Frobenius gap between ``T_{0->t}`` and ``T_{t-1->t} T_{0->t-1}``."""
    if rel_poses.shape != abs_poses.shape:
        raise ValueError(
            f"cycle_loss: relative {tuple(rel_poses.shape)} vs absolute {tuple(abs_poses.shape)}"
        )
    n1 = rel_poses.shape[-3]
    eye = torch.eye(4, dtype=abs_poses.dtype).expand(abs_poses.shape[:-3] + (1, 4, 4))
    prev = torch.cat([eye, abs_poses[..., :-1, :, :]], -3)
    gap = abs_poses - rel_poses @ prev
    return (gap * gap).sum((-1, -2)).sum(-1).mean() / n1


@dataclass
class LossBreakdown:
    appearance: torch.Tensor
    smoothness: torch.Tensor
    appearance_abs: torch.Tensor
    cycle: torch.Tensor
    lambda1: float = LAMBDA_SMOOTH
    lambda2: float = LAMBDA_CYCLE

    @property
    def total(self) -> torch.Tensor:
        return self.appearance + self.lambda1 * self.smoothness + self.appearance_abs + self.lambda2 * self.cycle

    def as_floats(self) -> dict:
        out = {
            name: float(torch.as_tensor(getattr(self, name)).detach())
            for name in ("appearance", "smoothness", "appearance_abs", "cycle", "total")
        }
        out["lambda1"], out["lambda2"] = self.lambda1, self.lambda2
        return out


def full_loss(frames, depths, rel_poses, abs_poses, k: Intrinsics,
              lambda1=LAMBDA_SMOOTH, lambda2=LAMBDA_CYCLE, alpha=ALPHA) -> LossBreakdown:
    return LossBreakdown(
        appearance=appearance_loss(frames, depths, rel_poses, k, alpha),
        smoothness=smoothness_loss(depths, frames),
        appearance_abs=abs_appearance_loss(frames, depths, abs_poses, k, alpha),
        cycle=cycle_loss(rel_poses, abs_poses),
        lambda1=lambda1,
        lambda2=lambda2,
    )


def long_window_length(n: int, m: int) -> int:
    return m * (n - 1) + 1


def long_loss(frames, depths, abs_poses, k: Intrinsics, n: int, m: int, alpha: float = ALPHA):
    """Anchor photometric loss averaged over ``m`` chained snippets of ``n`` frames.

    ``frames`` is ``(L, C, H, W)`` or batched ``(B, L, C, H, W)`` with
    ``L = m(n-1) + 1``; ``abs_poses[..., j, s]`` holds ``T_{a -> a+s+1}`` for
    the snippet anchored at ``a = j(n-1)``, shape ``(..., m, n-1, 4, 4)``.
    """
    if frames.dim() == 4:
        frames, depths, abs_poses = frames[None], depths[None], abs_poses[None]
    length = frames.shape[1]
    if length != long_window_length(n, m):
        raise ValueError(f"sequence of {length} frames does not tile as {m} snippets of {n}")
    if abs_poses.shape[1:3] != (m, n - 1):
        raise ValueError(f"expected poses shaped (.., {m}, {n - 1}, 4, 4), got {tuple(abs_poses.shape)}")
    terms = []
    for j in range(m):
        a = j * (n - 1)
        terms.append(
            abs_appearance_loss(frames[:, a : a + n], depths[:, a : a + n], abs_poses[:, j], k, alpha)
        )
    return torch.stack(terms).mean()
