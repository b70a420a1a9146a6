import json
import subprocess
import sys

import pytest

from ltmvo.cli import UsageError, main, parse_config_text
from ltmvo.trajectory import parse_kitti_poses

TINY_CONFIG = """\
# small enough for a test run
snippet_len = 3
long_snippets = 2
epochs = 1
stage2_epochs = 1
lr_drop_epoch = 1
steps_per_epoch = 2
depth_channels = 4,4,4
decoder_channels = 4,4,4
pose_channels = 4,4,4,4
hidden_channels = 4
fusion_channels = 4
synth.frames = 9
"""


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
            and not p.name.startswith("manifest_")}


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "7", "--frames", "9", "--out", str(tmp_path / name)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "poses.txt" in a and "calib.txt" in a


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["synth", "--bogus"]) == 1
    assert main(["nosuchcommand"]) == 1
    assert main(["synth", "--out", str(tmp_path), "--resolution", "64by48"]) == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("no_such_key = 3\n")
    assert main(["synth", "--out", str(tmp_path), "--config", str(bad)]) == 1
    assert "no_such_key" in capsys.readouterr().err


def test_runtime_failure_exits_2(tmp_path):
    assert main(["eval", "--est", str(tmp_path / "missing.txt"), "--gt", str(tmp_path / "missing.txt"),
                 "--out", str(tmp_path)]) == 2


def test_print_config_round_trips(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY_CONFIG)
    assert main(["synth", "--out", "x", "--config", str(cfg), "--seed", "4", "--print-config"]) == 0
    text = capsys.readouterr().out
    again = parse_config_text(text)
    assert again.train.seed == 4 and again.synth.seed == 4
    assert again.train.snippet_len == 3 and again.synth.frames == 9
    assert again.to_text() == text


def test_config_parse_errors():
    with pytest.raises(UsageError, match="line 2"):
        parse_config_text("seed = 1\nepochs\n")
    with pytest.raises(UsageError, match="bad value"):
        parse_config_text("epochs = many\n")


def test_eval_identical_trajectories(tmp_path, capsys, synth_seq):
    from ltmvo.data import save_sequence

    root = save_sequence(synth_seq, tmp_path / "seq")
    gt = str(root / "poses.txt")
    assert main(["eval", "--est", gt, "--gt", gt, "--out", str(tmp_path / "ev"), "--length-scale", "0.001"]) == 0
    out = capsys.readouterr().out
    values = dict(item.split("=", 1) for item in out.split())
    assert float(values["ate_rmse"]) < 1e-9 and float(values["rel_trans"]) < 1e-9 and float(values["rel_rot"]) < 1e-9
    assert (tmp_path / "ev" / "trajectory.svg").read_text().lstrip().startswith("<?xml")
    manifest = json.loads((tmp_path / "ev" / "manifest_eval.json").read_text())
    assert manifest["command"] == "eval" and manifest["finished"]
    assert manifest["outputs"] == ["metrics.txt", "metrics.csv", "trajectory.svg"]


def test_full_pipeline(tmp_path):
    cfg = tmp_path / "tiny.txt"
    cfg.write_text(TINY_CONFIG)
    common = ["--config", str(cfg)]
    seqs = []
    for seed in (1, 2):
        seqs.append(str(tmp_path / f"seq{seed}"))
        assert main(["synth", *common, "--seed", str(seed), "--out", seqs[-1]]) == 0
    s1, cache, s2 = tmp_path / "s1", tmp_path / "cache", tmp_path / "s2"
    assert main(["train1", *common, "--data", *seqs, "--out", str(s1)]) == 0
    assert {"stage1.ckpt", "config.txt", "history_stage1.csv", "loss_stage1.svg"} <= {p.name for p in s1.iterdir()}
    assert main(["cache", *common, "--checkpoint", str(s1 / "stage1.ckpt"), "--data", *seqs, "--out", str(cache)]) == 0
    assert sorted(p.name for p in cache.glob("*.ltmc")) == ["000_seq1.ltmc", "001_seq2.ltmc"]
    assert main(["train2", *common, "--checkpoint", str(s1 / "stage1.ckpt"), "--cache", str(cache),
                 "--data", *seqs, "--out", str(s2)]) == 0
    m1 = json.loads((s1 / "manifest_train1.json").read_text())
    m2 = json.loads((s2 / "manifest_train2.json").read_text())
    assert m2["checkpoint_hashes"][str(s1 / "stage1.ckpt")] == m1["checkpoint_hashes"]["stage1.ckpt"]
    inf = tmp_path / "inf"
    assert main(["infer", *common, "--checkpoint", str(s2 / "stage2.ckpt"), "--data", seqs[0],
                 "--out", str(inf), "--depths"]) == 0
    assert len(parse_kitti_poses(inf / "trajectory.txt")) == 9
    assert len(list((inf / "depth").glob("*.bin"))) == 9
    assert main(["eval", "--est", str(inf / "trajectory.txt"), "--gt", seqs[0] + "/poses.txt",
                 "--out", str(inf), "--length-scale", "0.001", "--pred-depth", str(inf / "depth"),
                 "--gt-depth", seqs[0] + "/depth"]) == 0
    assert "depth_abs_rel" in (inf / "metrics.txt").read_text()
    assert main(["plot", "--gt", seqs[0] + "/poses.txt", "--out", str(tmp_path / "plot")]) == 0
    # a cache built from another checkpoint is refused
    assert main(["train2", *common, "--checkpoint", str(s2 / "stage2.ckpt"), "--cache", str(cache),
                 "--data", *seqs, "--out", str(tmp_path / "s3")]) == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "ltmvo.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
