"""Stage-wise training.

Stage 1 trains every network end to end on short snippets with the full
objective.  Features for the second recurrent layer are then extracted once
per sequence and cached; stage 2 fine-tunes only the second layer on long
windows of chained snippets against the long-range loss.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import full_loss, long_loss, long_window_length
from .model import LTMVO, ModelConfig, snippet_bounds
from .networks import AdamState, adam_step, encode_checkpoint, param_set

log = logging.getLogger(__name__)

CACHE_MAGIC = b"LTMC1"
CACHE_VERSION = 1
CACHE_FIELDS = ("depth", "E", "H1", "M", "F_abs")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    snippet_len: int = 7
    long_snippets: int = 16
    batch_size: int = 2
    epochs: int = 20
    stage2_epochs: int = 20
    lr_initial: float = 5e-5
    lr_late: float = 5e-6
    lr_drop_epoch: int = 15
    stage2_lr_initial: float = 5e-5
    stage2_lr_late: float = 5e-6
    seed: int = 0
    resolution: tuple = (64, 48)
    lambda1: float = 0.001
    lambda2: float = 0.001
    grad_clip: float = 10.0
    steps_per_epoch: int = 0  # 0 = one pass over every snippet window
    depth_channels: tuple = (16, 32, 64)
    decoder_channels: tuple = (16, 16, 32)
    pose_channels: tuple = (16, 32, 64, 64)
    hidden_channels: int = 32
    fusion_channels: int = 64

    def __post_init__(self):
        if self.snippet_len < 3:
            raise ValueError("snippet_len must be at least 3")
        if self.long_snippets < 1:
            raise ValueError("long_snippets must be at least 1")
        if min(self.lr_initial, self.lr_late, self.stage2_lr_initial, self.stage2_lr_late) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_drop_epoch > max(self.epochs, self.stage2_epochs):
            raise ValueError("lr_drop_epoch exceeds the number of epochs")

    @property
    def long_window(self) -> int:
        return long_window_length(self.snippet_len, self.long_snippets)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            depth_channels=tuple(self.depth_channels),
            decoder_channels=tuple(self.decoder_channels),
            pose_channels=tuple(self.pose_channels),
            hidden_channels=self.hidden_channels,
            fusion_channels=self.fusion_channels,
        )

    def lr_for_epoch(self, epoch: int, stage: int = 1) -> float:
        """Learning rate for a 1-based epoch."""
        if stage == 1:
            return self.lr_initial if epoch <= self.lr_drop_epoch else self.lr_late
        return self.stage2_lr_initial if epoch <= self.lr_drop_epoch else self.stage2_lr_late

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_model(cfg: TrainConfig) -> LTMVO:
    torch.manual_seed(cfg.seed)
    return LTMVO(cfg.model_config())


def _check_finite(breakdown) -> None:
    for name, value in breakdown.as_floats().items():
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss component {name!r} became non-finite ({value})")


def _clip_and_step(params, adam, lr, clip):
    grads = {name: p.grad for name, p in params.items()}
    torch.nn.utils.clip_grad_norm_(list(params.values()), clip)
    adam_step(params, grads, adam, lr)


def _snippet_loss(model, sequences, items, cfg):
    """Full loss over one batch of ``(sequence, start)`` windows, grouped by intrinsics."""
    n = cfg.snippet_len
    groups: dict = {}
    for si, start in items:
        groups.setdefault(sequences[si].intrinsics, []).append(sequences[si].frames[start : start + n])
    parts = []
    for k, clips in groups.items():
        frames = torch.stack(clips)
        out = model.forward_snippet(frames)
        parts.append(
            (len(clips), full_loss(frames, out.depths, out.relative, out.absolute, k, cfg.lambda1, cfg.lambda2))
        )
    if len(parts) == 1:
        return parts[0][1]
    total = sum(c for c, _ in parts)
    first = parts[0][1]
    return dataclasses.replace(
        first,
        **{
            f: sum(c * getattr(b, f) for c, b in parts) / total
            for f in ("appearance", "smoothness", "appearance_abs", "cycle")
        },
    )


@dataclass
class StageResult:
    model: LTMVO
    history: list = field(default_factory=list)


def train_stage1(sequences, cfg: TrainConfig, model: LTMVO | None = None, on_epoch=None) -> StageResult:
    """End-to-end training on shuffled stride-1 snippet windows.

    ``on_epoch(record, model)`` is called after every epoch, e.g. to log a
    validation metric into the record.
    """
    n = cfg.snippet_len
    windows = [(i, s) for i, seq in enumerate(sequences) for s in range(len(seq) - n + 1)]
    if not windows:
        raise ValueError(f"no sequence has at least {n} frames")
    if model is None:
        model = build_model(cfg)
    model.train()
    rng = np.random.default_rng(cfg.seed)
    params = param_set(model)
    adam = AdamState()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_for_epoch(epoch, 1)
        order = rng.permutation(len(windows))
        if cfg.steps_per_epoch:
            order = order[: cfg.steps_per_epoch * cfg.batch_size]
        sums: dict = {}
        batches = 0
        for b in range(0, len(order), cfg.batch_size):
            items = [windows[j] for j in order[b : b + cfg.batch_size]]
            breakdown = _snippet_loss(model, sequences, items, cfg)
            _check_finite(breakdown)
            for p in params.values():
                p.grad = None
            breakdown.total.backward()
            _clip_and_step(params, adam, lr, cfg.grad_clip)
            for key, value in breakdown.as_floats().items():
                sums[key] = sums.get(key, 0.0) + value
            batches += 1
        record = {key: value / batches for key, value in sums.items()}
        record.update(epoch=epoch, lr=lr, stage=1)
        if on_epoch is not None:
            on_epoch(record, model)
        history.append(record)
        log.info("stage1 epoch=%d lr=%g total=%.6f", epoch, lr, record["total"])
    return StageResult(model, history)


# Feature cache -----------------------------------------------------------------


@dataclass
class FeatureCache:
    """Per-frame inputs of the second layer for one sequence.

    Frame 0 only ever acts as an anchor, so its ``H1``, ``M`` and ``F_abs``
    entries are empty.  Every other frame t belongs to the snippet anchored at
    ``(t-1)//stride * stride``.
    """

    snippet_len: int
    stride: int
    width: int
    height: int
    checkpoint_hash: bytes
    depth: list
    E: list
    H1: list
    M: list
    F_abs: list

    @property
    def frame_count(self) -> int:
        return len(self.depth)

    def bounds(self):
        return snippet_bounds(self.frame_count, self.snippet_len)

    def snippet(self, j: int) -> dict:
        """Second-layer inputs for snippet ``j``, batched with B = 1."""
        a, end = self.bounds()[j]
        rng = range(a + 1, end + 1)
        return {
            "E": torch.stack([self.E[t] for t in range(a, end + 1)])[None],
            "F_abs": torch.stack([self.F_abs[t] for t in rng])[None],
            "M": torch.stack([self.M[t] for t in rng])[None],
        }

    def depths(self, start: int, stop: int) -> torch.Tensor:
        return torch.stack(self.depth[start:stop])


def model_hash(model: LTMVO) -> bytes:
    return hashlib.sha256(encode_checkpoint(param_set(model))).digest()


@torch.no_grad()
def extract_features(model: LTMVO, sequence, cfg: TrainConfig, checkpoint_hash: bytes | None = None) -> FeatureCache:
    """Run the frozen parts of the model over a sequence with fixed stride ``N-1`` tiling."""
    n = cfg.snippet_len
    length = len(sequence)
    if length < 2:
        raise ValueError("sequence too short to cache")
    h, w = sequence.frames.shape[-2:]
    if (w, h) != tuple(cfg.resolution):
        raise ValueError(f"sequence resolution {w}x{h} does not match config {cfg.resolution}")
    was_training = model.training
    model.eval()
    depth, enc = [None] * length, [None] * length
    empty = torch.zeros(0)
    h1, mem, fab = [empty] * length, [empty] * length, [empty] * length
    for a, end in snippet_bounds(length, n):
        feats = model.snippet_features(sequence.frames[a : end + 1][None])
        for s, t in enumerate(range(a, end + 1)):
            if depth[t] is None:
                depth[t] = feats["depths"][0, s].clone()
                enc[t] = feats["E"][0, s].clone()
            if s > 0:
                h1[t] = feats["H1"][0, s - 1].clone()
                mem[t] = feats["M"][0, s - 1].clone()
                fab[t] = feats["F_abs"][0, s - 1].clone()
    model.train(was_training)
    return FeatureCache(
        snippet_len=n,
        stride=n - 1,
        width=w,
        height=h,
        checkpoint_hash=checkpoint_hash if checkpoint_hash is not None else model_hash(model),
        depth=depth,
        E=enc,
        H1=h1,
        M=mem,
        F_abs=fab,
    )


def _pack_tensor(t: torch.Tensor) -> bytes:
    t = t.detach().to(torch.float32).contiguous()
    return (
        struct.pack("<I", t.dim())
        + struct.pack(f"<{t.dim()}I", *t.shape)
        + t.numpy().astype("<f4").tobytes()
    )


def encode_cache(cache: FeatureCache) -> bytes:
    """``LTMC1`` + u32 header + 32-byte checkpoint hash + per-frame tensor records."""
    ce = cache.E[0].shape[0]
    ch = next((x.shape[0] for x in cache.H1 if x.numel()), 0)
    cf = next((x.shape[0] for x in cache.F_abs if x.numel()), 0)
    header = struct.pack(
        "<9I",
        CACHE_VERSION,
        cache.snippet_len,
        cache.stride,
        cache.frame_count,
        cache.width,
        cache.height,
        ce,
        ch,
        cf,
    )
    if len(cache.checkpoint_hash) != 32:
        raise ValueError("checkpoint hash must be 32 bytes")
    chunks = [CACHE_MAGIC, header, cache.checkpoint_hash]
    for t in range(cache.frame_count):
        for name in CACHE_FIELDS:
            chunks.append(_pack_tensor(getattr(cache, name)[t]))
    return b"".join(chunks)


def decode_cache(data: bytes) -> FeatureCache:
    if not data.startswith(CACHE_MAGIC):
        raise ValueError("not an LTMC1 feature cache (bad magic)")
    pos = len(CACHE_MAGIC)
    version, n, stride, count, width, height, _, _, _ = struct.unpack_from("<9I", data, pos)
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    pos += 36
    digest = data[pos : pos + 32]
    pos += 32
    fields = {name: [] for name in CACHE_FIELDS}
    for _ in range(count):
        for name in CACHE_FIELDS:
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            fields[name].append(torch.from_numpy(arr.astype(np.float32)))
    if pos != len(data):
        raise ValueError("trailing bytes in feature cache")
    return FeatureCache(n, stride, width, height, digest, **fields)


def write_cache(path, cache: FeatureCache) -> None:
    Path(path).write_bytes(encode_cache(cache))


def read_cache(path) -> FeatureCache:
    return decode_cache(Path(path).read_bytes())


def extract_and_cache_features(model, sequences, cfg: TrainConfig, out_dir, checkpoint_hash=None):
    """Write one ``<name>.ltmc`` cache per sequence; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = checkpoint_hash if checkpoint_hash is not None else model_hash(model)
    paths = []
    for i, seq in enumerate(sequences):
        path = out / f"{i:03d}_{seq.name}.ltmc"
        write_cache(path, extract_features(model, seq, cfg, digest))
        paths.append(path)
    return paths


# Stage 2 --------------------------------------------------------------------


def second_layer_from_cache(model: LTMVO, cache: FeatureCache, first: int, count: int, state=None):
    """Absolute poses for ``count`` snippets starting at snippet ``first``, state carried across."""
    mats = []
    for j in range(first, first + count):
        _, absm, state = model.second_layer_snippet(cache.snippet(j), state)
        mats.append(absm[0])
    return mats, state


def _load(source) -> FeatureCache:
    return source if isinstance(source, FeatureCache) else read_cache(source)


def long_windows(frame_count: int, n: int, m: int):
    """Start snippets of every window of ``m`` full snippets."""
    full = (frame_count - 1) // (n - 1)
    return list(range(0, full - m + 1))


def train_stage2(
    sequences, caches, model: LTMVO, cfg: TrainConfig, expected_hash: bytes | None = None, on_epoch=None
) -> StageResult:
    """Fine-tune the second layer on ``M(N-1)+1``-frame windows with the long-range loss.

    ``caches`` holds :class:`FeatureCache` objects or paths; paths are read
    one window at a time so memory does not grow with the dataset.
    """
    n, m = cfg.snippet_len, cfg.long_snippets
    windows = []
    for i, seq in enumerate(sequences):
        starts = long_windows(len(seq), n, m)
        if not starts:
            log.warning("sequence %s (%d frames) shorter than one %d-frame window; skipped",
                        seq.name, len(seq), cfg.long_window)
        windows.extend((i, j) for j in starts)
    if not windows:
        raise ValueError(f"no sequence provides a {cfg.long_window}-frame window")
    trainable = set(model.second_layer_names())
    params = {k: v for k, v in param_set(model).items() if k in trainable}
    flags = {k: p.requires_grad for k, p in model.named_parameters()}
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
    model.train()
    rng = np.random.default_rng(cfg.seed + 1)
    adam = AdamState()
    history = []
    try:
        for epoch in range(1, cfg.stage2_epochs + 1):
            lr = cfg.lr_for_epoch(epoch, 2)
            total = 0.0
            for w in rng.permutation(len(windows)):
                i, j0 = windows[w]
                cache = _load(caches[i])
                if expected_hash is not None and cache.checkpoint_hash != expected_hash:
                    raise ValueError(f"cache for sequence {i} was built from a different checkpoint")
                a = j0 * (n - 1)
                mats, _ = second_layer_from_cache(model, cache, j0, m)
                seq = sequences[i]
                loss = long_loss(
                    seq.frames[a : a + cfg.long_window],
                    cache.depths(a, a + cfg.long_window),
                    torch.stack(mats),
                    seq.intrinsics,
                    n,
                    m,
                )
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"long-range loss became non-finite ({float(loss.detach())})")
                for p in params.values():
                    p.grad = None
                loss.backward()
                _clip_and_step(params, adam, lr, cfg.grad_clip)
                total += float(loss.detach())
            record = {"epoch": epoch, "lr": lr, "stage": 2, "long": total / len(windows)}
            if on_epoch is not None:
                on_epoch(record, model)
            history.append(record)
            log.info("stage2 epoch=%d lr=%g long=%.6f", epoch, lr, record["long"])
    finally:
        for name, p in model.named_parameters():
            p.requires_grad_(flags[name])
    return StageResult(model, history)
