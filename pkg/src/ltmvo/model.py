"""Depth network plus the two-layer recurrent pose network with a memory buffer.

The first ConvLSTM layer predicts frame-to-frame motion ``T_{t-1 -> t}`` and
stores its hidden states in a per-snippet memory buffer.  The second layer
predicts anchor-to-frame poses ``T_{0 -> t}`` from anchor/current pose
features, depth features of both frames and a read-out of the memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .geom import SE3, exp_matrix
from .networks import (
    ConvLSTMCell,
    ConvLSTMState,
    DepthNet,
    PoseEncoder,
    PoseHead,
    init_weights,
)
from .trajectory import Trajectory

SECOND_LAYER_MODULES = ("fusion", "lstm2", "head2")


@dataclass(frozen=True)
class ModelConfig:
    depth_channels: tuple = (16, 32, 64)
    decoder_channels: tuple = (16, 16, 32)
    pose_channels: tuple = (16, 32, 64, 64)
    hidden_channels: int = 32
    fusion_channels: int = 64


class MemoryBuffer:
    """First-layer hidden states of the current snippet, in frame order."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.slots: list[torch.Tensor] = []

    def __len__(self):
        return len(self.slots)

    def append(self, hidden: torch.Tensor) -> None:
        if len(self.slots) >= self.capacity:
            raise RuntimeError(f"memory buffer full ({self.capacity} slots)")
        self.slots.append(hidden)

    def clear(self) -> None:
        self.slots.clear()


def memory_readout(slots, query: torch.Tensor):
    """Softmax-weighted average of the slots.

    Weights come from the scaled dot product of the spatially pooled query and
    slots.  ``slots`` is a sequence of ``(B, C, h, w)`` tensors; returns the
    read-out ``(B, C, h, w)`` and weights ``(B, S)``.
    """
    if len(slots) == 0:
        raise RuntimeError("memory_readout on an empty buffer")
    stack = torch.stack(list(slots), 1)  # (B, S, C, h, w)
    keys = stack.mean(dim=(-2, -1))
    q = query.mean(dim=(-2, -1))
    scores = (keys * q[:, None]).sum(-1) / math.sqrt(keys.shape[-1])
    weights = torch.softmax(scores, dim=1)
    return (weights[..., None, None, None] * stack).sum(1), weights


@dataclass
class SnippetOutput:
    depths: torch.Tensor  # (B, N, H, W)
    relative: torch.Tensor  # (B, N-1, 4, 4), index t-1 holds T_{t-1 -> t}
    absolute: torch.Tensor  # (B, N-1, 4, 4), index t-1 holds T_{0 -> t}
    relative_twists: torch.Tensor
    absolute_twists: torch.Tensor
    features: dict = field(default_factory=dict)
    state2: ConvLSTMState | None = None

    @property
    def length(self) -> int:
        return self.depths.shape[1]


class LTMVO(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.depth = DepthNet(cfg.depth_channels, cfg.decoder_channels)
        self.pose_encoder = PoseEncoder(cfg.pose_channels)
        cf, ch, ce = cfg.pose_channels[-1], cfg.hidden_channels, cfg.depth_channels[-1]
        self.lstm1 = ConvLSTMCell(cf, ch)
        self.head1 = PoseHead(ch)
        self.fusion = nn.Conv2d(cf + 2 * ce + ch, cfg.fusion_channels, 1)
        self.lstm2 = ConvLSTMCell(cfg.fusion_channels, ch)
        self.head2 = PoseHead(ch)
        init_weights(self)

    def second_layer_parameters(self):
        return [p for name in SECOND_LAYER_MODULES for p in getattr(self, name).parameters()]

    def second_layer_names(self):
        return [
            n for n, _ in self.named_parameters() if n.split(".")[0] in SECOND_LAYER_MODULES
        ]

    def zero_heads(self):
        self.head1.zero_()
        self.head2.zero_()
        return self

    # Per-step pieces ---------------------------------------------------------

    def depth_features(self, frames):
        """Depth and pooled depth-encoder features for ``(B, C, H, W)`` frames."""
        depth, enc = self.depth(frames)
        return depth, enc

    def pool_to(self, feat, like):
        if feat.shape[-2:] == like.shape[-2:]:
            return feat
        return F.adaptive_avg_pool2d(feat, like.shape[-2:])

    def first_layer_step(self, prev, cur, state=None, features=None):
        """Returns ``(twist, T_{t-1 -> t}, new state, hidden)``."""
        f = self.pose_encoder(cur, prev) if features is None else features
        out, state = self.lstm1(f, state)
        xi = self.head1(out)
        return xi, exp_matrix(xi), state, out

    def second_layer_from_features(self, f_abs, e_anchor, e_cur, memory, state=None):
        """Trainable part of the second layer; all inputs share the pose-feature grid."""
        x = self.fusion(torch.cat([f_abs, e_anchor, e_cur, memory], 1))
        out, state = self.lstm2(x, state)
        xi = self.head2(out)
        return xi, exp_matrix(xi), state

    def second_layer_step(self, anchor, cur, e_anchor, e_cur, memory, state=None):
        f_abs = self.pose_encoder(anchor, cur)
        return self.second_layer_from_features(
            f_abs, self.pool_to(e_anchor, f_abs), self.pool_to(e_cur, f_abs), memory, state
        )

    # Snippets ----------------------------------------------------------------

    def snippet_features(self, frames):
        """Everything the second layer consumes that does not depend on its weights.

        ``frames`` is ``(B, N, C, H, W)``.  Runs the depth network on every
        frame and the first layer over consecutive pairs, filling a fresh
        memory buffer.
        """
        b, n = frames.shape[:2]
        if n < 2:
            raise ValueError("a snippet needs at least 2 frames")
        flat = frames.reshape((b * n,) + frames.shape[2:])
        depth, enc = self.depth_features(flat)
        depths = depth.reshape(b, n, *depth.shape[-2:])
        prev = frames[:, :-1].reshape((b * (n - 1),) + frames.shape[2:])
        cur = frames[:, 1:].reshape((b * (n - 1),) + frames.shape[2:])
        anchor = frames[:, :1].expand(b, n - 1, *frames.shape[2:]).reshape(cur.shape)
        f_rel = self.pose_encoder(cur, prev).reshape(b, n - 1, -1, *self._grid(frames))
        f_abs = self.pose_encoder(anchor, cur).reshape(b, n - 1, -1, *self._grid(frames))
        enc = self.pool_to(enc, f_abs[:, 0]).reshape(b, n, -1, *f_abs.shape[-2:])

        buffer = MemoryBuffer(capacity=n)
        state = None
        rel_xi, rel = [], []
        for t in range(n - 1):
            xi, mat, state, hidden = self.first_layer_step(None, None, state, features=f_rel[:, t])
            buffer.append(hidden)
            rel_xi.append(xi)
            rel.append(mat)
        memory = [memory_readout(buffer.slots, h)[0] for h in buffer.slots]
        return {
            "depths": depths,
            "E": enc,
            "F_abs": f_abs,
            "H1": torch.stack(buffer.slots, 1),
            "M": torch.stack(memory, 1),
            "relative": torch.stack(rel, 1),
            "relative_twists": torch.stack(rel_xi, 1),
        }

    def _grid(self, frames):
        h, w = frames.shape[-2:]
        for _ in range(len(self.cfg.pose_channels)):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    def second_layer_snippet(self, feats, state=None):
        """Run the second layer over one snippet's cached features."""
        e = feats["E"]
        abs_xi, absm = [], []
        for t in range(1, e.shape[1]):
            xi, mat, state = self.second_layer_from_features(
                feats["F_abs"][:, t - 1], e[:, 0], e[:, t], feats["M"][:, t - 1], state
            )
            abs_xi.append(xi)
            absm.append(mat)
        return torch.stack(abs_xi, 1), torch.stack(absm, 1), state

    def forward_snippet(self, frames, state2=None) -> SnippetOutput:
        """Full forward over ``(B, N, C, H, W)`` frames, N >= 3.

        Both recurrent states start from zero unless ``state2`` carries a
        second-layer state in from a previous snippet.
        """
        if frames.dim() == 4:
            frames = frames[None]
        if frames.shape[1] < 3:
            raise ValueError(f"forward_snippet needs N >= 3 frames, got {frames.shape[1]}")
        feats = self.snippet_features(frames)
        abs_xi, absm, state2 = self.second_layer_snippet(feats, state2)
        return SnippetOutput(
            depths=feats["depths"],
            relative=feats["relative"],
            absolute=absm,
            relative_twists=feats["relative_twists"],
            absolute_twists=abs_xi,
            features=feats,
            state2=state2,
        )

    forward = forward_snippet


# Trajectories ------------------------------------------------------------------


def snippet_bounds(length: int, n: int):
    """Anchor/end frame pairs for stride ``n-1`` tiling; the last snippet may be shorter."""
    if length < 2:
        return []
    bounds, a = [], 0
    while a < length - 1:
        bounds.append((a, min(a + n - 1, length - 1)))
        a += n - 1
    return bounds


def chain_snippet_poses(local_poses, bounds) -> Trajectory:
    """Chain snippet-local anchor poses into world-from-camera poses.

    ``local_poses[j][s]`` is ``T_{a -> a+s+1}`` (an :class:`SE3`) for the snippet
    ``bounds[j] = (a, end)``.  Snippets share their boundary frame.
    """
    poses = [SE3.identity()]
    for (a, end), local in zip(bounds, local_poses):
        if len(local) != end - a:
            raise ValueError(f"snippet ({a}, {end}) expects {end - a} poses, got {len(local)}")
        base = poses[a]
        for t_local in local:
            poses.append(base @ t_local.inverse())
    return Trajectory(poses)


def chain_relative(relatives):
    """``T_{a -> a+s+1}`` for each s from consecutive ``T_{t-1 -> t}``."""
    out, acc = [], SE3.identity()
    for r in relatives:
        acc = r @ acc
        out.append(acc)
    return out


def _to_se3(mats):
    return [SE3.from_matrix(m) for m in mats.detach().double().cpu().numpy()]


@torch.no_grad()
def infer_trajectory(model: LTMVO, frames, n: int = 7, mode: str = "second_layer", carry_state: bool = True):
    """Predict a world-from-camera trajectory for ``(T, C, H, W)`` frames.

    Snippets of ``n`` frames are tiled with stride ``n-1``.  A final snippet
    shorter than 3 frames falls back to first-layer motion.  With
    ``carry_state`` the second-layer recurrent state flows across snippets.
    """
    if mode not in ("second_layer", "first_layer"):
        raise ValueError(f"unknown mode {mode!r}")
    length = frames.shape[0]
    if length < 3:
        raise ValueError(f"need at least 3 frames, got {length}")
    was_training = model.training
    model.eval()
    bounds = snippet_bounds(length, n)
    local, state2 = [], None
    for a, end in bounds:
        clip = frames[a : end + 1][None]
        if clip.shape[1] < 3:
            feats = model.snippet_features(clip)
            local.append(chain_relative(_to_se3(feats["relative"][0])))
            continue
        out = model.forward_snippet(clip, state2 if carry_state else None)
        state2 = out.state2
        if mode == "second_layer":
            local.append(_to_se3(out.absolute[0]))
        else:
            local.append(chain_relative(_to_se3(out.relative[0])))
    model.train(was_training)
    return chain_snippet_poses(local, bounds)
