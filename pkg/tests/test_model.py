import math

import numpy as np
import pytest
import torch

from ltmvo.data import gt_snippet_poses
from ltmvo.geom import SE3
from ltmvo.model import (
    LTMVO,
    MemoryBuffer,
    ModelConfig,
    chain_relative,
    chain_snippet_poses,
    infer_trajectory,
    memory_readout,
    snippet_bounds,
)

SMALL = ModelConfig((8, 8, 8), (8, 8, 8), (8, 8, 8, 8), 8, 8)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return LTMVO(SMALL)


def test_forward_shapes(model):
    out = model(torch.rand(2, 5, 3, 48, 64))
    assert out.depths.shape == (2, 5, 48, 64)
    assert out.relative.shape == out.absolute.shape == (2, 4, 4, 4)
    assert out.relative_twists.shape == (2, 4, 6)
    assert out.features["M"].shape == out.features["H1"].shape == (2, 4, 8, 3, 4)
    bottom = torch.tensor([0.0, 0.0, 0.0, 1.0])
    assert torch.allclose(out.absolute[..., 3, :], bottom.expand(2, 4, 4))


def test_forward_rejects_short_snippets(model):
    with pytest.raises(ValueError):
        model(torch.rand(1, 2, 3, 48, 64))


def test_zero_heads_predict_identity(model):
    m = LTMVO(SMALL).zero_heads()
    out = m(torch.rand(1, 4, 3, 48, 64))
    assert torch.equal(out.relative, torch.eye(4).expand(1, 3, 4, 4))
    assert torch.equal(out.absolute, torch.eye(4).expand(1, 3, 4, 4))


def test_memory_buffer_capacity():
    buf = MemoryBuffer(2)
    buf.append(torch.zeros(1))
    buf.append(torch.zeros(1))
    with pytest.raises(RuntimeError):
        buf.append(torch.zeros(1))
    buf.clear()
    assert len(buf) == 0


def test_memory_readout_convex_combination():
    torch.manual_seed(1)
    slots = [torch.randn(2, 4, 3, 3) for _ in range(5)]
    query = torch.randn(2, 4, 3, 3)
    out, w = memory_readout(slots, query)
    assert torch.allclose(w.sum(1), torch.ones(2))
    assert (w > 0).all()
    manual = sum(w[:, i, None, None, None] * s for i, s in enumerate(slots))
    assert torch.allclose(out, manual, atol=1e-6)
    q, k = query.mean((-1, -2)), torch.stack(slots, 1).mean((-1, -2))
    ref = torch.softmax((k * q[:, None]).sum(-1) / math.sqrt(4), 1)
    assert torch.allclose(w, ref)
    with pytest.raises(RuntimeError):
        memory_readout([], query)


def test_single_slot_readout_is_that_slot():
    s = torch.randn(1, 4, 2, 2)
    out, w = memory_readout([s], torch.randn(1, 4, 2, 2))
    assert torch.equal(w, torch.ones(1, 1)) and torch.allclose(out, s)


def test_snippet_bounds():
    assert snippet_bounds(97, 7) == [(6 * j, 6 * j + 6) for j in range(16)]
    assert snippet_bounds(10, 7) == [(0, 6), (6, 9)]
    assert snippet_bounds(8, 7) == [(0, 6), (6, 7)]
    assert snippet_bounds(1, 7) == []


def test_chaining_ground_truth_reconstructs_trajectory(synth_seq):
    traj = synth_seq.gt_trajectory
    bounds = snippet_bounds(len(traj), 7)
    local = []
    for a, end in bounds:
        _, ab = gt_snippet_poses(traj, a, end - a + 1, dtype=torch.float64)
        local.append([SE3.from_matrix(m) for m in ab.numpy()])
    rebuilt = chain_snippet_poses(local, bounds)
    assert np.abs(rebuilt.matrices() - traj.matrices()).max() < 1e-9


def test_chain_relative_matches_absolute(synth_seq):
    rel, ab = gt_snippet_poses(synth_seq.gt_trajectory, 0, 7, dtype=torch.float64)
    chained = chain_relative([SE3.from_matrix(m) for m in rel.numpy()])
    assert all(np.allclose(c.matrix(), m, atol=1e-12) for c, m in zip(chained, ab.numpy()))


def test_chain_snippet_poses_checks_lengths():
    with pytest.raises(ValueError):
        chain_snippet_poses([[SE3.identity()]], [(0, 3)])


def test_infer_trajectory(model):
    frames = torch.rand(15, 3, 48, 64)
    traj = infer_trajectory(model, frames, 7)
    assert len(traj) == 15
    assert traj[0].allclose(SE3.identity())
    first = infer_trajectory(model, frames, 7, mode="first_layer")
    assert len(first) == 15
    # 14 frames leave a 2-frame tail snippet that falls back to the first layer
    assert len(infer_trajectory(model, frames[:14], 7)) == 14
    with pytest.raises(ValueError):
        infer_trajectory(model, frames[:2], 7)
    with pytest.raises(ValueError):
        infer_trajectory(model, frames, 7, mode="third_layer")


def test_state_carry_changes_only_later_snippets(model):
    frames = torch.rand(13, 3, 48, 64)
    carried = infer_trajectory(model, frames, 7, carry_state=True)
    fresh = infer_trajectory(model, frames, 7, carry_state=False)
    assert np.allclose(carried.matrices()[:7], fresh.matrices()[:7], atol=1e-6)
    assert not np.allclose(carried.matrices()[7:], fresh.matrices()[7:], atol=1e-9)


def test_second_layer_parameter_split(model):
    names = model.second_layer_names()
    assert names and all(n.split(".")[0] in ("fusion", "lstm2", "head2") for n in names)
    total = sum(p.numel() for p in model.parameters())
    assert 0 < sum(p.numel() for p in model.second_layer_parameters()) < total
