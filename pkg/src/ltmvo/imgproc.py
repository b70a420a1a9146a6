"""Differentiable resampling and image similarity.

Images are torch tensors laid out ``(..., C, H, W)`` with values in [0, 1].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .geom import BORDER_TOL, Intrinsics, correspondence_grid

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def bilinear_sample(src: torch.Tensor, grid: torch.Tensor):
    """Sample ``src`` (..., C, H, W) at pixel coordinates ``grid`` (..., H', W', 2).

    Coordinates outside ``[0, W-1] x [0, H-1]`` (beyond a round-off tolerance)
    give zeros and a false mask entry; there is no clamping to the edge.  Differentiable with respect to
    both the image and the coordinates.
    """
    h, w = src.shape[-2:]
    x, y = grid[..., 0], grid[..., 1]
    e = BORDER_TOL
    valid = (x >= -e) & (x <= w - 1 + e) & (y >= -e) & (y <= h - 1 + e) & torch.isfinite(x) & torch.isfinite(y)
    zero = torch.zeros_like(x)
    x = torch.where(valid, x, zero).clamp(0, w - 1)
    y = torch.where(valid, y, zero).clamp(0, h - 1)
    x0 = torch.floor(x).clamp(0, w - 1)
    y0 = torch.floor(y).clamp(0, h - 1)
    wx = x - x0
    wy = y - y0
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    batch = src.shape[:-3]
    c = src.shape[-3]
    flat = src.reshape(batch + (c, h * w))
    out_hw = grid.shape[-3:-1]

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(batch + (1, -1)).expand(batch + (c, -1))
        return torch.gather(flat, -1, idx).reshape(batch + (c,) + out_hw)

    wx = wx.unsqueeze(-3)
    wy = wy.unsqueeze(-3)
    top = gather(y0i, x0i) * (1 - wx) + gather(y0i, x1i) * wx
    bottom = gather(y1i, x0i) * (1 - wx) + gather(y1i, x1i) * wx
    out = top * (1 - wy) + bottom * wy
    return out * valid.unsqueeze(-3).to(out.dtype), valid


def synthesize_view(src: torch.Tensor, k: Intrinsics, t, depth: torch.Tensor):
    """Render ``src`` into the view whose depth is ``depth``.

    ``t`` maps the target camera's coordinates into the source camera's, so
    each target pixel is projected into ``src`` and sampled there.
    """
    grid, grid_valid = correspondence_grid(k, t, depth)
    out, sample_valid = bilinear_sample(src, grid.to(src.dtype))
    return out, grid_valid & sample_valid


def _box3(x):
    p = F.pad(x, (1, 1, 1, 1), mode="reflect")
    rows = p[..., :-2, :] + p[..., 1:-1, :] + p[..., 2:, :]
    return (rows[..., :-2] + rows[..., 1:-1] + rows[..., 2:]) / 9.0


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over a 3x3 box window, averaged over channels, clamped to [0, 1]."""
    if a.shape != b.shape:
        raise ValueError(f"ssim_map: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    lead = a.shape[:-3]
    a4 = a.reshape((-1,) + a.shape[-3:])
    b4 = b.reshape((-1,) + b.shape[-3:])
    mu_a = _box3(a4)
    mu_b = _box3(b4)
    var_a = _box3(a4 * a4) - mu_a * mu_a
    var_b = _box3(b4 * b4) - mu_b * mu_b
    cov = _box3(a4 * b4) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    s = torch.clamp(num / den, 0, 1).mean(-3)
    return s.reshape(lead + s.shape[-2:])


def erode_mask(mask: torch.Tensor) -> torch.Tensor:
    """Keep pixels whose whole 3x3 neighbourhood is valid (image borders count as valid)."""
    lead = mask.shape[:-2]
    m = mask.reshape((-1, 1) + mask.shape[-2:]).to(torch.float32)
    m = -F.max_pool2d(F.pad(-m, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
    return (m > 0.5).reshape(lead + mask.shape[-2:])


def image_gradients(img: torch.Tensor):
    """Forward differences along x and y; the last column/row is zero."""
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"image_gradients needs at least 2x2 pixels, got {h}x{w}")
    gx = F.pad(img[..., :, 1:] - img[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(img[..., 1:, :] - img[..., :-1, :], (0, 0, 0, 1))
    return gx, gy


def read_png(path) -> torch.Tensor:
    """8-bit PNG to a float32 ``(C, H, W)`` tensor in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def write_png(path, img: torch.Tensor) -> None:
    arr = img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(Path(path), format="PNG")
