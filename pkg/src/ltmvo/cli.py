"""Command-line entry point: ``ltmvo <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    SynthConfig,
    load_kitti_sequence,
    read_depth,
    save_sequence,
    synth_generate,
    write_depth,
)
from .evaluation import evaluate, umeyama_align
from .gradcheck import TOLERANCE, run_gradcheck
from .model import LTMVO, infer_trajectory
from .networks import load_checkpoint, save_checkpoint
from .plotting import plot_loss_curve, plot_trajectories
from .train import (
    TrainConfig,
    extract_and_cache_features,
    model_hash,
    read_cache,
    train_stage1,
    train_stage2,
)
from .trajectory import parse_kitti_poses, write_kitti_poses

log = logging.getLogger("ltmvo")

CONFIG_NAME = "config.txt"
SYNTH_PREFIX = "synth."


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# Logging ----------------------------------------------------------------------


class KeyValueFormatter(logging.Formatter):
    """``ts=... level=... logger=... msg="..."`` records, one per line."""

    def format(self, record):
        ts = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(record.created))
        msg = record.getMessage().replace('"', "'")
        line = f'ts={ts}.{int(record.msecs):03d}Z level={record.levelname} logger={record.name} msg="{msg}"'
        if record.exc_info:
            line += f' exc="{self.formatException(record.exc_info)!r}"'
        return line


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.captureWarnings(True)


# Config -----------------------------------------------------------------------


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = text.replace("x", ",").split(",")
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts if p.strip())
    return text


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    synth: SynthConfig

    def items(self):
        for f in dataclasses.fields(self.train):
            yield f.name, getattr(self.train, f.name)
        for f in dataclasses.fields(self.synth):
            yield SYNTH_PREFIX + f.name, getattr(self.synth, f.name)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments allowed); ``overrides`` win."""
    train_defaults = TrainConfig()
    synth_defaults = SynthConfig()
    train_kw, synth_kw = {}, {}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((key, value, f"config line {lineno}"))
    entries += [(k, v, f"flag for {k}") for k, v in (overrides or {}).items()]
    for key, value, where in entries:
        if key.startswith(SYNTH_PREFIX):
            name, defaults, target = key[len(SYNTH_PREFIX):], synth_defaults, synth_kw
        else:
            name, defaults, target = key, train_defaults, train_kw
        if not hasattr(defaults, name):
            raise UsageError(f"{where}: unknown key {key!r}")
        if not isinstance(value, str):
            target[name] = value
            continue
        try:
            target[name] = _parse_value(value, getattr(defaults, name))
        except ValueError as exc:
            raise UsageError(f"{where}: bad value for {key!r}: {exc}") from None
    try:
        return RunConfig(TrainConfig(**train_kw), dataclasses.replace(synth_defaults, **synth_kw))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _parse_resolution(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 64x48, got {text!r}") from None
    if w < 8 or h < 8:
        raise argparse.ArgumentTypeError("resolution must be at least 8x8")
    return w, h


def _load_config(args) -> RunConfig:
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides[SYNTH_PREFIX + "seed"] = args.seed
    if args.resolution is not None:
        overrides["resolution"] = args.resolution
        overrides[SYNTH_PREFIX + "width"], overrides[SYNTH_PREFIX + "height"] = args.resolution
    if args.snippet_len is not None:
        overrides["snippet_len"] = args.snippet_len
    if args.long_snippets is not None:
        overrides["long_snippets"] = args.long_snippets
    if getattr(args, "frames", None) is not None:
        overrides[SYNTH_PREFIX + "frames"] = args.frames
    return parse_config_text(text, overrides)


# Manifest ---------------------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config_hash: str
    config: str
    seed: int
    inputs: list
    checkpoint_hashes: dict
    outputs: list
    started: str
    finished: str = ""
    tool_version: str = __version__

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / f"manifest_{self.command}.json"
        _atomic_write(path, (json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n").encode())
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# Helpers ----------------------------------------------------------------------


def _load_sequences(paths, cfg: RunConfig):
    seqs = []
    for p in paths:
        seq = load_kitti_sequence(p, resolution=cfg.train.resolution)
        log.info("loaded sequence %s frames=%d", p, len(seq))
        seqs.append(seq)
    return seqs


def _model_for(checkpoint: Path, cfg: RunConfig) -> tuple[LTMVO, str]:
    """Rebuild the model from the config saved next to a checkpoint (if any)."""
    saved = checkpoint.parent / CONFIG_NAME
    if saved.exists():
        cfg = parse_config_text(saved.read_text(encoding="utf-8"))
    model = LTMVO(cfg.train.model_config())
    digest = load_checkpoint(checkpoint, model)
    return model, digest


def _write_history(path: Path, history) -> None:
    keys = sorted({k for h in history for k in h})
    lines = [",".join(keys)]
    lines += [",".join(_format_value(h.get(k, "")) for k in keys) for h in history]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


# Subcommands ------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig, manifest: RunManifest):
    seq = synth_generate(cfg.synth)
    out = save_sequence(seq, args.out)
    manifest.outputs.append(str(out))
    log.info("wrote synthetic sequence %s frames=%d", out, len(seq))


def cmd_train1(args, cfg: RunConfig, manifest: RunManifest):
    seqs = _load_sequences(args.data, cfg)
    result = train_stage1(seqs, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(out / "stage1.ckpt", result.model)
    _atomic_write(out / CONFIG_NAME, cfg.to_text().encode())
    _write_history(out / "history_stage1.csv", result.history)
    plot_loss_curve(out / "loss_stage1.svg", result.history, ("total", "appearance", "appearance_abs"))
    manifest.checkpoint_hashes["stage1.ckpt"] = digest
    manifest.outputs += ["stage1.ckpt", CONFIG_NAME, "history_stage1.csv", "loss_stage1.svg"]


def cmd_cache(args, cfg: RunConfig, manifest: RunManifest):
    model, digest = _model_for(Path(args.checkpoint), cfg)
    manifest.checkpoint_hashes[str(args.checkpoint)] = digest
    seqs = _load_sequences(args.data, cfg)
    paths = extract_and_cache_features(model, seqs, cfg.train, args.out, bytes.fromhex(digest))
    manifest.outputs += [p.name for p in paths]


def cmd_train2(args, cfg: RunConfig, manifest: RunManifest):
    ckpt = Path(args.checkpoint)
    model, digest = _model_for(ckpt, cfg)
    manifest.checkpoint_hashes[str(ckpt)] = digest
    saved = ckpt.parent / CONFIG_NAME
    if saved.exists():
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(
            parse_config_text(saved.read_text(encoding="utf-8")).train,
            stage2_epochs=cfg.train.stage2_epochs,
            stage2_lr_initial=cfg.train.stage2_lr_initial,
            stage2_lr_late=cfg.train.stage2_lr_late,
            long_snippets=cfg.train.long_snippets,
            seed=cfg.train.seed,
        ))
    seqs = _load_sequences(args.data, cfg)
    caches = sorted(Path(args.cache).glob("*.ltmc"))
    if len(caches) != len(seqs):
        raise RuntimeError(f"found {len(caches)} caches for {len(seqs)} sequences")
    for c in caches:
        if read_cache(c).checkpoint_hash != bytes.fromhex(digest):
            raise RuntimeError(f"{c} was not built from {ckpt}")
    result = train_stage2(seqs, caches, model, cfg.train, expected_hash=bytes.fromhex(digest))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.checkpoint_hashes["stage2.ckpt"] = save_checkpoint(out / "stage2.ckpt", result.model)
    _atomic_write(out / CONFIG_NAME, cfg.to_text().encode())
    _write_history(out / "history_stage2.csv", result.history)
    plot_loss_curve(out / "loss_stage2.svg", result.history, ("long",))
    manifest.outputs += ["stage2.ckpt", CONFIG_NAME, "history_stage2.csv", "loss_stage2.svg"]


def cmd_infer(args, cfg: RunConfig, manifest: RunManifest):
    model, digest = _model_for(Path(args.checkpoint), cfg)
    manifest.checkpoint_hashes[str(args.checkpoint)] = digest
    seq = _load_sequences([args.data], cfg)[0]
    traj = infer_trajectory(model, seq.frames, cfg.train.snippet_len, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kitti_poses(traj, out / "trajectory.txt")
    manifest.outputs.append("trajectory.txt")
    if args.depths:
        (out / "depth").mkdir(exist_ok=True)
        with torch.no_grad():
            model.eval()
            for i, frame in enumerate(seq.frames):
                depth, _ = model.depth(frame[None])
                write_depth(out / "depth" / f"{i:06d}.bin", depth[0].numpy())
        manifest.outputs.append("depth/")
    if seq.gt_trajectory is not None:
        plot_trajectories(out / "trajectory.svg", seq.gt_trajectory, traj, title=seq.name)
        manifest.outputs.append("trajectory.svg")


def _depth_stack(directory):
    files = sorted(Path(directory).glob("*.bin"), key=lambda p: int(p.stem))
    if not files:
        raise FileNotFoundError(f"no depth maps in {directory}")
    return np.stack([read_depth(f) for f in files])


def cmd_eval(args, cfg: RunConfig, manifest: RunManifest):
    est, gt = parse_kitti_poses(args.est), parse_kitti_poses(args.gt)
    depths = {}
    if args.pred_depth and args.gt_depth:
        depths = {"pred_depths": _depth_stack(args.pred_depth), "gt_depths": _depth_stack(args.gt_depth)}
    report = evaluate(est, gt, align=args.align, length_scale=args.length_scale,
                      snippet_len=args.snippet_window, **depths)
    text = report.to_text()
    sys.stdout.write(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "metrics.txt", text.encode())
    _atomic_write(out / "metrics.csv", report.to_csv().encode())
    est_m, gt_m = est.matched(gt)
    try:
        aligned = umeyama_align(est_m, gt_m, args.align)[0]
    except ValueError:
        aligned = est_m
    plot_trajectories(out / "trajectory.svg", gt_m, aligned, title=f"ATE {report.ate_rmse:.4g} m")
    manifest.inputs += [str(args.est), str(args.gt)]
    manifest.outputs += ["metrics.txt", "metrics.csv", "trajectory.svg"]


def cmd_gradcheck(args, cfg: RunConfig, manifest: RunManifest):
    results = run_gradcheck(seed=cfg.train.seed)
    lines = [f"op={r.name} max_rel_error={r.max_rel_error:.3e} kinks={r.kinks} "
             f"status={'pass' if r.passed else 'FAIL'}" for r in results]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "gradcheck.txt", text.encode())
        manifest.outputs.append("gradcheck.txt")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"gradient check above {TOLERANCE:g} for: {', '.join(failed)}")


def cmd_plot(args, cfg: RunConfig, manifest: RunManifest):
    gt = parse_kitti_poses(args.gt) if args.gt else None
    est = parse_kitti_poses(args.est) if args.est else None
    if gt is None and est is None:
        raise UsageError("plot needs --gt and/or --est")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plot_trajectories(out / "trajectory.svg", gt, est)
    manifest.outputs.append("trajectory.svg")


COMMANDS = {
    "synth": cmd_synth,
    "train1": cmd_train1,
    "cache": cmd_cache,
    "train2": cmd_train2,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file (flags win)")
    common.add_argument("--seed", type=int)
    common.add_argument("--resolution", type=_parse_resolution, help="WxH, e.g. 64x48")
    common.add_argument("--snippet-len", type=int)
    common.add_argument("--long-snippets", type=int)
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ltmvo", description="Monocular visual odometry with two recurrent layers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic sequence")
    p.add_argument("--frames", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train1", parents=[common], help="stage-1 training")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cache", parents=[common], help="extract second-layer features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train2", parents=[common], help="stage-2 fine-tuning of the second layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", parents=[common], help="predict a trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("second_layer", "first_layer"), default="second_layer")
    p.add_argument("--depths", action="store_true", help="also write predicted depth maps")

    p = sub.add_parser("eval", parents=[common], help="trajectory (and depth) metrics")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--align", choices=("sim3", "se3", "none"), default="sim3")
    p.add_argument("--length-scale", type=float, default=1.0,
                   help="multiplier on the 100..800 m subsequence lengths")
    p.add_argument("--snippet-window", type=int, default=5)
    p.add_argument("--pred-depth")
    p.add_argument("--gt-depth")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--out")

    p = sub.add_parser("plot", parents=[common], help="render trajectories to SVG")
    p.add_argument("--gt")
    p.add_argument("--est")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
    except UsageError as exc:
        sys.stderr.write(f"ltmvo: error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    _setup_logging(args.verbose)
    threads = os.environ.get("LTMVO_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    manifest = RunManifest(
        command=args.command,
        argv=argv,
        config_hash=cfg.digest(),
        config=cfg.to_text(),
        seed=cfg.train.seed,
        inputs=[str(p) for p in np.atleast_1d(getattr(args, "data", None) or [])],
        checkpoint_hashes={},
        outputs=[],
        started=_now(),
    )
    try:
        COMMANDS[args.command](args, cfg, manifest)
    except UsageError as exc:
        sys.stderr.write(f"ltmvo: error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 2
        log.error("%s failed: %s", args.command, exc)
        return 2
    manifest.finished = _now()
    out = getattr(args, "out", None)
    if out:
        manifest.write(Path(out))
    log.info("%s done", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
