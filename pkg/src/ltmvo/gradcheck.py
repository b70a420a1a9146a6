"""Central finite-difference checks of every differentiable op and loss.

All checks run in float64.  Non-scalar ops are reduced with fixed random
weights.  For each input the analytic gradient is compared with central
differences (step ``h``) along a few random directions and at a few random
coordinates; the reported figure is the worst relative error
``|fd - an| / max(|fd|, |an|, floor)``.

Masks, minima and clamps make the losses piecewise smooth.  A probe whose
central differences at ``h`` and ``h/2`` disagree straddles such a kink; it
is redrawn (and counted) instead of being scored.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import geom, imgproc, losses, networks
from .geom import Intrinsics
from .model import LTMVO, ModelConfig, memory_readout

STEP = 1e-4
TOLERANCE = 1e-3
FLOOR = 1e-6
KINK_TOL = 1e-2
MAX_REDRAWS = 20


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    evaluations: int
    seconds: float
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _rel(fd, an):
    return abs(fd - an) / max(abs(fd), abs(an), FLOOR)


def check(name, fn, inputs, gen, directions=3, coords=8, step=STEP) -> CheckResult:
    """Compare autograd with central differences for scalar ``fn()`` over ``inputs``.

    ``inputs`` are leaf tensors that ``fn`` closes over; they are perturbed
    in place under ``no_grad``.
    """
    start = time.perf_counter()
    for x in inputs:
        x.grad = None
    out = fn()
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst, evals, kinks = 0.0, 1, 0
    def central(x, v, h):
        with torch.no_grad():
            x.add_(h * v)
            up = float(fn())
            x.sub_(2 * h * v)
            down = float(fn())
            x.add_(h * v)
        return (up - down) / (2 * h)

    def fd_along(x, v):
        # smooth functions give matching central differences at h and h/2
        coarse, fine = central(x, v, step), central(x, v, step / 2)
        smooth = abs(coarse - fine) <= KINK_TOL * max(abs(coarse), abs(fine), FLOOR)
        return coarse, smooth

    def probe(x, g, draw):
        nonlocal worst, evals, kinks
        for _ in range(MAX_REDRAWS):
            v, an = draw()
            fd, smooth = fd_along(x, v)
            evals += 4
            if smooth:
                worst = max(worst, _rel(fd, an))
                return
            kinks += 1
        worst = max(worst, _rel(fd, an))

    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        flat = x.numel()

        def direction():
            v = torch.as_tensor(gen.standard_normal(x.shape), dtype=x.dtype)
            v /= v.norm()
            return v, float((g * v).sum())

        def coordinate():
            i = int(gen.integers(flat))
            v = torch.zeros(flat, dtype=x.dtype)
            v[i] = 1.0
            return v.reshape(x.shape), float(g.reshape(-1)[i])

        for _ in range(directions):
            probe(x, g, direction)
        for _ in range(min(coords, flat)):
            probe(x, g, coordinate)
    return CheckResult(name, worst, evals, time.perf_counter() - start, kinks)


def _leaf(gen, shape, scale=1.0, offset=0.0):
    return torch.tensor(offset + scale * gen.standard_normal(shape), dtype=torch.float64, requires_grad=True)


def _smooth_images(gen, shape):
    """Random images that vary smoothly so warps have informative gradients."""
    *lead, c, h, w = shape
    coarse = torch.tensor(gen.uniform(0.1, 0.9, (int(np.prod(lead or [1])), c, 3, 4)))
    img = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=True).clamp(0.05, 0.95)
    return img.reshape(shape).clone().requires_grad_(True)


def _weights(gen, like):
    return torch.tensor(gen.standard_normal(tuple(like.shape)), dtype=torch.float64)


def _weighted(fn, gen):
    """Turn a tensor-valued closure into a scalar one with fixed random weights."""
    cache = {}

    def scalar():
        out = fn()
        if "w" not in cache:
            cache["w"] = _weights(gen, out)
        return (out * cache["w"]).sum()

    return scalar


def _cases(gen):
    h, w = 6, 8
    k = Intrinsics(6.0, 6.0, 3.5, 2.5, w, h)

    xi = _leaf(gen, (4, 6), 0.5)
    yield "exp_matrix", _weighted(lambda: geom.exp_matrix(xi), gen), [xi]
    xi_small = _leaf(gen, (4, 6), 1e-3)
    yield "exp_matrix_small_angle", _weighted(lambda: geom.exp_matrix(xi_small), gen), [xi_small]
    xi_inv = _leaf(gen, (3, 6), 0.5)
    yield "invert_pose", _weighted(lambda: geom.invert_pose(geom.exp_matrix(xi_inv)), gen), [xi_inv]

    xi_c = _leaf(gen, (6,), 0.05)
    depth = torch.tensor(gen.uniform(2.0, 4.0, (h, w)), requires_grad=True)
    yield (
        "correspondence_grid",
        _weighted(lambda: geom.correspondence_grid(k, geom.exp_matrix(xi_c), depth)[0], gen),
        [xi_c, depth],
    )

    src = _leaf(gen, (2, 3, h, w))
    base = np.stack(np.meshgrid(np.arange(w), np.arange(h)), -1).astype(np.float64)
    frac = gen.uniform(0.2, 0.8, (2, h, w, 2))
    grid = torch.tensor(np.clip(base[None] + frac - 0.5 * (base[None] > 0), 0.3, [w - 1.3, h - 1.3]),
                        requires_grad=True)
    yield "bilinear_sample", _weighted(lambda: imgproc.bilinear_sample(src, grid)[0], gen), [src, grid]

    img = _smooth_images(gen, (3, h, w))
    xi_v = _leaf(gen, (6,), 0.02)
    depth_v = torch.tensor(gen.uniform(4.0, 6.0, (h, w)), requires_grad=True)
    yield (
        "synthesize_view",
        _weighted(lambda: imgproc.synthesize_view(img, k, geom.exp_matrix(xi_v), depth_v)[0], gen),
        [img, xi_v, depth_v],
    )

    a, b = _smooth_images(gen, (2, 3, h, w)), _smooth_images(gen, (2, 3, h, w))
    yield "ssim_map", _weighted(lambda: imgproc.ssim_map(a, b), gen), [a, b]
    yield "rho_map", _weighted(lambda: losses.rho_map(a, b), gen), [a, b]
    yield "image_gradients", _weighted(lambda: torch.stack(imgproc.image_gradients(a)), gen), [a]

    logits = _leaf(gen, (2, h, w))
    yield "disparity_to_depth", _weighted(lambda: networks.disparity_to_depth(torch.sigmoid(logits)), gen), [logits]

    torch.manual_seed(int(gen.integers(1 << 31)))
    cell = networks.ConvLSTMCell(3, 4).double()
    x = _leaf(gen, (2, 3, 3, 4))
    hid, mem = _leaf(gen, (2, 4, 3, 4), 0.5), _leaf(gen, (2, 4, 3, 4), 0.5)

    def lstm():
        out, state = networks.conv_lstm_step(x, networks.ConvLSTMState(hid, mem), cell)
        return torch.cat([out, state.cell], 1)

    yield "conv_lstm_step", _weighted(lstm, gen), [x, hid, mem, *cell.parameters()]

    head = networks.PoseHead(4).double()
    with torch.no_grad():
        for p in head.parameters():
            p.normal_(0, 1)
    feat = _leaf(gen, (2, 4, 3, 4))
    yield "pose_head", _weighted(lambda: networks.pose_head(feat, head)[1], gen), [feat, *head.parameters()]

    slots = [_leaf(gen, (2, 4, 3, 4)) for _ in range(3)]
    query = _leaf(gen, (2, 4, 3, 4))
    yield "memory_readout", _weighted(lambda: memory_readout(slots, query)[0], gen), [*slots, query]

    # losses over a 3-frame snippet
    frames = _smooth_images(gen, (1, 3, 3, h, w))
    depths = torch.tensor(gen.uniform(4.0, 6.0, (1, 3, h, w)), requires_grad=True)
    xi_rel = _leaf(gen, (1, 2, 6), 0.01)
    xi_abs = _leaf(gen, (1, 2, 6), 0.01)

    def rel():
        return geom.exp_matrix(xi_rel)

    def ab():
        return geom.exp_matrix(xi_abs)

    yield "appearance_loss", lambda: losses.appearance_loss(frames, depths, rel(), k), [frames, depths, xi_rel]
    yield "smoothness_loss", lambda: losses.smoothness_loss(depths, frames), [frames, depths]
    yield "abs_appearance_loss", lambda: losses.abs_appearance_loss(frames, depths, ab(), k), [frames, depths, xi_abs]
    yield "cycle_loss", lambda: losses.cycle_loss(rel(), ab()), [xi_rel, xi_abs]
    yield (
        "full_loss",
        lambda: losses.full_loss(frames, depths, rel(), ab(), k).total,
        [frames, depths, xi_rel, xi_abs],
    )

    n, m = 3, 2
    length = losses.long_window_length(n, m)
    lframes = _smooth_images(gen, (length, 3, h, w))
    ldepths = torch.tensor(gen.uniform(4.0, 6.0, (length, h, w)), requires_grad=True)
    xi_long = _leaf(gen, (m, n - 1, 6), 0.01)
    yield (
        "long_loss",
        lambda: losses.long_loss(lframes, ldepths, geom.exp_matrix(xi_long), k, n, m),
        [lframes, ldepths, xi_long],
    )

    # end to end through the networks into the full objective
    torch.manual_seed(int(gen.integers(1 << 31)))
    model = LTMVO(ModelConfig((4, 4, 4), (4, 4, 4), (4, 4, 4, 4), 4, 4)).double()
    with torch.no_grad():
        for head_ in (model.head1, model.head2):
            for p in head_.parameters():
                p.normal_(0, 0.5)
    clip = _smooth_images(gen, (1, 3, 3, 16, 16))
    kk = Intrinsics(12.0, 12.0, 7.5, 7.5, 16, 16)

    def objective():
        out = model.forward_snippet(clip)
        return losses.full_loss(clip, out.depths, out.relative, out.absolute, kk).total

    yield "model_full_loss", objective, list(model.parameters())


def run_gradcheck(seed: int = 0, only=None):
    """Run every check; returns a list of :class:`CheckResult`."""
    gen = np.random.default_rng(seed)
    results = []
    with torch.random.fork_rng():
        for name, fn, inputs in _cases(gen):
            if only and name not in only:
                continue
            results.append(check(name, fn, inputs, gen))
    return results
