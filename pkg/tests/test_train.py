import dataclasses
import logging
import struct

import pytest
import torch

from ltmvo.networks import param_set, params_hash
from ltmvo.train import (
    CACHE_MAGIC,
    TrainConfig,
    TrainingDiverged,
    build_model,
    decode_cache,
    encode_cache,
    extract_and_cache_features,
    extract_features,
    long_windows,
    model_hash,
    read_cache,
    second_layer_from_cache,
    train_stage1,
    train_stage2,
)

TINY = dict(
    depth_channels=(4, 4, 4),
    decoder_channels=(4, 4, 4),
    pose_channels=(4, 4, 4, 4),
    hidden_channels=4,
    fusion_channels=4,
)


def tiny_cfg(**kw):
    base = dict(snippet_len=3, long_snippets=2, epochs=2, stage2_epochs=2, lr_drop_epoch=1,
                lr_initial=1e-3, lr_late=1e-4, stage2_lr_initial=1e-3, stage2_lr_late=1e-4,
                steps_per_epoch=2, seed=5, **TINY)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def short_seqs(synth_seq):
    return [dataclasses.replace(synth_seq, frames=synth_seq.frames[:9], gt_depths=synth_seq.gt_depths[:9],
                                gt_trajectory=None, name="a"),
            dataclasses.replace(synth_seq, frames=synth_seq.frames[8:17], gt_depths=synth_seq.gt_depths[8:17],
                                gt_trajectory=None, name="b")]


def test_config_defaults_and_schedule():
    cfg = TrainConfig()
    assert (cfg.snippet_len, cfg.long_snippets, cfg.batch_size, cfg.epochs) == (7, 16, 2, 20)
    assert cfg.long_window == 97
    assert cfg.lr_for_epoch(15) == 5e-5 and cfg.lr_for_epoch(16) == 5e-6
    with pytest.raises(ValueError):
        TrainConfig(snippet_len=2)
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=0)


def test_stage1_reproducible_and_records_history(short_seqs):
    cfg = tiny_cfg()
    a = train_stage1(short_seqs, cfg)
    b = train_stage1(short_seqs, cfg)
    assert params_hash(param_set(a.model)) == params_hash(param_set(b.model))
    assert [h["lr"] for h in a.history] == [1e-3, 1e-4]
    assert all(h["total"] > 0 for h in a.history)
    c = train_stage1(short_seqs, tiny_cfg(seed=6))
    assert params_hash(param_set(a.model)) != params_hash(param_set(c.model))


def test_stage1_needs_long_enough_sequences(short_seqs):
    with pytest.raises(ValueError):
        train_stage1(short_seqs, tiny_cfg(snippet_len=12))


def test_stage1_nan_aborts_with_component(short_seqs):
    cfg = tiny_cfg(epochs=1)
    model = build_model(cfg)
    with torch.no_grad():
        model.head1.linear.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="appearance|cycle"):
        train_stage1(short_seqs, cfg, model=model)


def test_cache_round_trip(short_seqs):
    cfg = tiny_cfg()
    model = build_model(cfg)
    cache = extract_features(model, short_seqs[0], cfg)
    data = encode_cache(cache)
    assert data.startswith(CACHE_MAGIC)
    assert struct.unpack_from("<6I", data, 5) == (1, 3, 2, 9, 64, 48)
    back = decode_cache(data)
    assert back.checkpoint_hash == model_hash(model)
    assert back.frame_count == 9 and back.H1[0].numel() == 0
    for name in ("depth", "E", "H1", "M", "F_abs"):
        for x, y in zip(getattr(cache, name), getattr(back, name)):
            assert torch.equal(x, y)
    with pytest.raises(ValueError, match="magic"):
        decode_cache(b"XXXXX" + data[5:])
    with pytest.raises(ValueError):
        decode_cache(data + b"\0")


def test_cache_matches_online_second_layer(short_seqs):
    cfg = tiny_cfg()
    model = build_model(cfg)
    seq = short_seqs[0]
    cache = extract_features(model, seq, cfg)
    with torch.no_grad():
        cached, _ = second_layer_from_cache(model, cache, 0, 4)
        state, online = None, []
        for j in range(4):
            out = model.forward_snippet(seq.frames[2 * j : 2 * j + 3][None], state)
            state = out.state2
            online.append(out.absolute[0])
    worst = max(float((a - b).abs().max()) for a, b in zip(cached, online))
    assert worst < 1e-6


def test_stage2_freezes_everything_else(short_seqs, tmp_path):
    cfg = tiny_cfg()
    model = build_model(cfg)
    paths = extract_and_cache_features(model, short_seqs, cfg, tmp_path)
    second = set(model.second_layer_names())
    frozen = {k: v.clone() for k, v in param_set(model).items() if k not in second}
    before = {k: v.clone() for k, v in param_set(model).items() if k in second}
    result = train_stage2(short_seqs, paths, model, cfg, expected_hash=model_hash(model))
    after = param_set(result.model)
    assert all(torch.equal(frozen[k], after[k]) for k in frozen)
    assert any(not torch.equal(before[k], after[k]) for k in before)
    assert all(p.requires_grad for p in model.parameters())
    assert len(result.history) == 2 and result.history[0]["long"] > 0


def test_stage2_reproducible(short_seqs):
    cfg = tiny_cfg()
    hashes = []
    for _ in range(2):
        model = build_model(cfg)
        caches = [extract_features(model, s, cfg) for s in short_seqs]
        train_stage2(short_seqs, caches, model, cfg)
        hashes.append(params_hash(param_set(model)))
    assert hashes[0] == hashes[1]


def test_stage2_checks_cache_provenance(short_seqs):
    cfg = tiny_cfg()
    model = build_model(cfg)
    caches = [extract_features(model, s, cfg) for s in short_seqs]
    with pytest.raises(ValueError, match="different checkpoint"):
        train_stage2(short_seqs, caches, model, cfg, expected_hash=b"\0" * 32)


def test_long_windows_and_short_sequence_skip(short_seqs, caplog):
    assert long_windows(97, 7, 16) == [0]
    assert long_windows(96, 7, 16) == []
    assert long_windows(9, 3, 2) == [0, 1, 2]
    cfg = tiny_cfg(long_snippets=5)
    model = build_model(cfg)
    caches = [extract_features(model, s, cfg) for s in short_seqs]
    with caplog.at_level(logging.WARNING), pytest.raises(ValueError, match="window"):
        train_stage2(short_seqs, caches, model, cfg)
    assert "skipped" in caplog.text
