"""Network building blocks on top of torch autograd.

Small from-scratch encoders stand in for pretrained backbones.  Also holds
the Adam update used by the trainer and the ``LTMVO1`` checkpoint format.
"""
from __future__ import annotations

import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .geom import exp_matrix

MIN_DEPTH = 0.1
MAX_DEPTH = 100.0
POSE_SCALE = 0.01
# images in [0, 1] are centred before the first convolution
INPUT_MEAN = 0.5
INPUT_STD = 0.25
CHECKPOINT_MAGIC = b"LTMVO1"


def conv_block(cin, cout, stride=1, kernel=3):
    return nn.Sequential(nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2), nn.ELU())


def upsample2x(x, size=None):
    if size is not None:
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def normalize_image(img):
    return (img - INPUT_MEAN) / INPUT_STD


def init_weights(module: nn.Module) -> None:
    """He-normal convolutions, zero biases.

    The torch default (uniform, gain 1/sqrt(3)) shrinks activations layer by
    layer, and the small frame-to-frame differences that carry motion then
    vanish next to the appearance content.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvLSTMState(NamedTuple):
    hidden: torch.Tensor
    cell: torch.Tensor


class ConvLSTMCell(nn.Module):
    """ConvLSTM cell; all four gates come from one convolution over ``[x, h]``."""

    def __init__(self, in_channels, hidden_channels, kernel_size=3):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(
            in_channels + hidden_channels, 4 * hidden_channels, kernel_size, padding=kernel_size // 2
        )

    def initial_state(self, x: torch.Tensor) -> ConvLSTMState:
        shape = (x.shape[0], self.hidden_channels) + tuple(x.shape[-2:])
        zeros = torch.zeros(shape, dtype=x.dtype, device=x.device)
        return ConvLSTMState(zeros, zeros.clone())

    def forward(self, x, state: ConvLSTMState | None = None):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"conv_lstm_step: expected input (B, {self.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if state is None:
            state = self.initial_state(x)
        h, c = state
        if h.shape[0] != x.shape[0] or h.shape[-2:] != x.shape[-2:]:
            raise ValueError(
                f"conv_lstm_step: input {tuple(x.shape)} does not match state {tuple(h.shape)}"
            )
        i, f, o, g = self.gates(torch.cat([x, h], 1)).chunk(4, 1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, ConvLSTMState(h, c)


def conv_lstm_step(x, state, cell: ConvLSTMCell):
    return cell(x, state)


class DepthEncoder(nn.Module):
    def __init__(self, channels=(16, 32, 64)):
        super().__init__()
        stages, cin = [], 3
        for cout in channels:
            stages.append(nn.Sequential(conv_block(cin, cout, stride=2), conv_block(cout, cout)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.channels = tuple(channels)

    def forward(self, img):
        feats = []
        x = img
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class DepthDecoder(nn.Module):
    """U-Net style decoder with skip connections ending in a sigmoid disparity."""

    def __init__(self, enc_channels=(16, 32, 64), channels=(16, 16, 32)):
        super().__init__()
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        cin = enc_channels[-1]
        for level in reversed(range(len(enc_channels))):
            cout = channels[level]
            skip = enc_channels[level - 1] if level > 0 else 3
            self.up.append(conv_block(cin, cout))
            self.fuse.append(conv_block(cout + skip, cout))
            cin = cout
        self.disp = nn.Conv2d(cin, 1, 3, padding=1)

    def forward(self, img, feats):
        skips = [img] + feats[:-1]
        x = feats[-1]
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips)):
            x = upsample2x(up(x), size=skip.shape[-2:])
            x = fuse(torch.cat([x, skip], 1))
        return torch.sigmoid(self.disp(x))[:, 0]


def disparity_to_depth(disp):
    """Map sigmoid output in (0, 1) affinely to disparity, so depth spans [0.1, 100]."""
    lo, hi = 1.0 / MAX_DEPTH, 1.0 / MIN_DEPTH
    return 1.0 / (lo + (hi - lo) * disp)


class DepthNet(nn.Module):
    def __init__(self, enc_channels=(16, 32, 64), dec_channels=(16, 16, 32)):
        super().__init__()
        self.encoder = DepthEncoder(enc_channels)
        self.decoder = DepthDecoder(enc_channels, dec_channels)

    def forward(self, img):
        """Return ``(depth (B, H, W), bottleneck features)``."""
        x = normalize_image(img)
        feats = self.encoder(x)
        return disparity_to_depth(self.decoder(x, feats)), feats[-1]


def depth_net(img, net: DepthNet):
    return net(img)[0]


class PoseEncoder(nn.Module):
    """Two frames stacked on channels through four stride-2 stages."""

    def __init__(self, channels=(16, 32, 64, 64)):
        super().__init__()
        layers, cin = [], 6
        for cout in channels:
            layers.append(conv_block(cin, cout, stride=2))
            cin = cout
        self.layers = nn.Sequential(*layers)
        self.out_channels = channels[-1]

    def forward(self, img_a, img_b):
        if img_a.shape != img_b.shape:
            raise ValueError(
                f"pose_encoder: frame shapes differ {tuple(img_a.shape)} vs {tuple(img_b.shape)}"
            )
        return self.layers(normalize_image(torch.cat([img_a, img_b], 1)))


class PoseHead(nn.Module):
    """Global average pool, linear to 6 values, scaled by 0.01."""

    def __init__(self, in_channels):
        super().__init__()
        self.linear = nn.Linear(in_channels, 6)

    def forward(self, x):
        return POSE_SCALE * self.linear(x.mean(dim=(-2, -1)))

    def zero_(self):
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.bias.zero_()
        return self


def pose_head(x, head: PoseHead):
    """Twist vectors ``(B, 6)`` [rot | trans] and the pose matrices ``(B, 4, 4)``."""
    xi = head(x)
    return xi, exp_matrix(xi)


# Parameters --------------------------------------------------------------


def param_set(module: nn.Module, prefix: str = "") -> OrderedDict:
    """Named learnable tensors in construction order."""
    out = OrderedDict()
    for name, p in module.named_parameters(prefix=prefix.rstrip(".")):
        if name in out:
            raise ValueError(f"duplicate parameter name {name}")
        out[name] = p
    return out


def params_hash(params, names=None) -> str:
    h = hashlib.sha256()
    for name, p in params.items():
        if names is not None and name not in names:
            continue
        h.update(name.encode())
        h.update(p.detach().to(torch.float32).contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update applied in place to ``params``.

    ``params`` and ``grads`` are name-keyed mappings; every parameter needs a
    gradient entry (``None`` counts as missing).
    """
    for name in params:
        if grads.get(name) is None:
            raise KeyError(f"adam_step: missing gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


# Checkpoints ---------------------------------------------------------------


def encode_checkpoint(params) -> bytes:
    """``LTMVO1`` then per parameter: name length, name, rank, extents (u32 LE), f32 LE values."""
    chunks = [CHECKPOINT_MAGIC]
    for name, p in params.items():
        raw = name.encode("utf-8")
        t = p.detach().to(torch.float32).contiguous().cpu()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(t.numpy().astype("<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes) -> OrderedDict:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not an LTMVO1 checkpoint (bad magic)")
    out = OrderedDict()
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = math.prod(shape)
        values = torch.frombuffer(bytearray(take(4 * count)), dtype=torch.float32)
        out[name] = values.reshape(shape).clone()
    return out


def save_checkpoint(path, module: nn.Module) -> str:
    """Write the module's parameters; returns the sha256 of the file bytes."""
    data = encode_checkpoint(param_set(module))
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, module: nn.Module) -> str:
    with open(path, "rb") as fh:
        data = fh.read()
    tensors = decode_checkpoint(data)
    params = param_set(module)
    missing = set(params) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise ValueError(
                    f"shape mismatch for {name}: {tuple(tensors[name].shape)} vs {tuple(p.shape)}"
                )
            p.copy_(tensors[name].to(p.dtype))
    return hashlib.sha256(data).hexdigest()
