"""Command-line entry point: ``imucoco <command> [options]``.

Exit status is 0 on success, 1 for invalid input or usage, 2 for internal
errors.  The worker count for loss-table building comes from the
``IMUCOCO_WORKERS`` environment variable (default 1); results do not depend
on it.
"""
from __future__ import annotations

import argparse
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path

import numpy as np

from .body import JOINT_NAMES, NUM_JOINTS, BodyConfig, build_canonical_body
from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .config import dataclass_from_kv, read_kv
from .errors import ConfigurationError, ImucocoError, ValidationError
from .evaluation import (
    SweepRow,
    device_tracks,
    evaluate_sequence,
    format_report,
    infer_pose,
    placement_sweep,
    read_devices,
    read_placements,
    read_pose,
    score_estimate,
    write_pose,
)
from .matchmaker import assign_devices, build_loss_table, make_devices, read_table, write_table
from .motion import KINDS, generate_motion, read_motion, write_motion
from .network import NetConfig, init_model
from .training import TrainConfig, format_loss_log, make_optimizer, prepare_corpus, train_phase1, train_phase2
from .vimu import read_imutrack, synthesize_joint_imu, synthesize_mesh_imu, write_imutrack

WORKERS_ENV = "IMUCOCO_WORKERS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigurationError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def load_settings(path, seed: int | None) -> tuple[NetConfig, TrainConfig]:
    """Split one ``key = value`` file into network and training settings."""
    values = read_kv(path) if path else {}
    net_keys = {f.name for f in fields(NetConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - net_keys - train_keys)
    if unknown:
        raise ConfigurationError(f"{path}: unknown settings {', '.join(unknown)}")
    net = dataclass_from_kv(NetConfig, {k: v for k, v in values.items() if k in net_keys}).validate()
    train_values = {k: v for k, v in values.items() if k in train_keys}
    if seed is not None:
        train_values["seed"] = seed
    return net, dataclass_from_kv(TrainConfig, train_values).validate()


def _body(args):
    return build_canonical_body(BodyConfig.from_file(args.body) if args.body else None)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _require_out(args):
    if not args.out:
        raise ValidationError(f"{args.command} needs --out")
    return args.out


def _checkpoint(args, body):
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.model.body_fingerprint != body.fingerprint:
        raise ValidationError(
            f"checkpoint was trained on body {ckpt.model.body_fingerprint}, session body is {body.fingerprint}"
        )
    return ckpt


def _devices(args, body):
    names, coords = read_devices(args.devices)
    return make_devices(body, coords, names)


# ----- commands ------------------------------------------------------------------------


def cmd_genmotion(args):
    seq = generate_motion(args.seed, args.duration, args.kind, fps=args.fps)
    write_motion(seq, _require_out(args))


def cmd_synth(args):
    body = _body(args)
    motion = read_motion(args.motion)
    if args.joint is not None:
        write_imutrack(synthesize_joint_imu(body, motion, args.joint), _require_out(args))
    elif args.vertex is not None:
        write_imutrack(synthesize_mesh_imu(body, motion, args.vertex), _require_out(args))
    else:
        out = Path(_require_out(args))
        out.mkdir(parents=True, exist_ok=True)
        devices = _devices(args, body)
        for device, track in zip(devices, device_tracks(body, motion, devices)):
            write_imutrack(track, out / f"{device.name}.imu")


def cmd_train(args):
    body = _body(args)
    net_cfg, cfg = load_settings(args.config, args.seed)
    corpus = [read_motion(p) for p in args.corpus]
    if not corpus:
        raise ValidationError("train needs at least one --corpus motion")
    out = _require_out(args)
    start = 0
    if args.phase == 1:
        if args.checkpoint:
            ckpt = _checkpoint(args, body)
            model = ckpt.model
            optimizer = restore_optimizer(ckpt, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
            start = int(ckpt.meta.get("step", 0)) if ckpt.meta.get("phase") == 1 else 0
        else:
            model = init_model(net_cfg, cfg.seed, body.fingerprint)
            optimizer = make_optimizer(model, cfg)
        result = train_phase1(model, body, corpus, cfg, optimizer, start, prepare_corpus(body, corpus))
    else:
        if not args.checkpoint:
            raise ValidationError("phase 2 needs --checkpoint with a phase-1 model")
        ckpt = _checkpoint(args, body)
        model = ckpt.model
        if ckpt.meta.get("phase") == 2:
            optimizer = restore_optimizer(ckpt, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
            start = int(ckpt.meta.get("step", 0))
        else:
            optimizer = make_optimizer(model, cfg)
        result = train_phase2(model, body, corpus, cfg, optimizer, start, prepare_corpus(body, corpus))
    meta = {"phase": args.phase, "step": start + result.steps, "train_config": cfg.to_dict()}
    save_checkpoint(out, model, result.optimizer, meta)
    Path(args.log or f"{out}.log").write_text(format_loss_log(result.log))


def cmd_losstable(args):
    body = _body(args)
    ckpt = _checkpoint(args, body)
    corpus = [read_motion(p) for p in args.corpus]
    table = build_loss_table(ckpt.model, body, corpus, args.stride, workers=worker_count())
    write_table(table, _require_out(args))


def cmd_assign(args):
    body = _body(args)
    ckpt = _checkpoint(args, body)
    table = read_table(args.table, body, ckpt.model)
    devices = _devices(args, body)
    chosen = assign_devices(table, devices, body)
    text = "".join(f"{j} {JOINT_NAMES[j]} {devices[d].name}\n" for j, d in enumerate(chosen))
    _emit(text, args.out)


def cmd_infer(args):
    body = _body(args)
    ckpt = _checkpoint(args, body)
    table = read_table(args.table, body, ckpt.model)
    devices = _devices(args, body)
    if args.tracks:
        tracks = [read_imutrack(p) for p in args.tracks]
        # a track's stored placement is replaced by its device's coordinate
        tracks = [t.with_placement(d.placement) for t, d in zip(tracks, devices)]
    elif args.motion:
        tracks = device_tracks(body, read_motion(args.motion), devices)
    else:
        raise ValidationError("infer needs --tracks (one per device) or --motion")
    estimate, _ = infer_pose(ckpt.model, table, devices, tracks, body, args.zero_coordinates)
    write_pose(estimate, _require_out(args))


def cmd_eval(args):
    body = _body(args)
    motions = [read_motion(p) for p in args.motion]
    if not motions:
        raise ValidationError("eval needs --motion")
    if args.pose:
        if len(motions) != 1:
            raise ValidationError("eval --pose compares against exactly one --motion")
        gae, trans = score_estimate(read_pose(args.pose), body, motions[0])
        rows = [SweepRow(Path(args.pose).stem, gae, trans)]
    else:
        if not (args.checkpoint and args.table and args.devices):
            raise ValidationError("eval needs --pose, or --checkpoint, --table and --devices")
        ckpt = _checkpoint(args, body)
        table = read_table(args.table, body, ckpt.model)
        devices = _devices(args, body)
        scores = [evaluate_sequence(ckpt.model, table, body, m, devices, args.zero_coordinates) for m in motions]
        rows = [
            SweepRow(
                Path(args.devices).stem,
                float(np.mean([s.gae for s in scores])),
                float(np.mean([s.translation_error for s in scores])),
            )
        ]
    _emit(format_report(rows), args.out)


def cmd_sweep(args):
    body = _body(args)
    ckpt = _checkpoint(args, body)
    table = read_table(args.table, body, ckpt.model)
    corpus = [read_motion(p) for p in args.corpus]
    rows = placement_sweep(ckpt.model, table, body, corpus, read_placements(args.placements), args.zero_coordinates)
    _emit(format_report(rows), args.out)


# ----- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out", help="output path")
    common.add_argument("--body", help="body settings file (default: canonical body)")

    parser = _Parser(prog="imucoco", description="Flexible-placement IMU pose estimation on a synthetic body.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("genmotion", parents=[common], help="generate a synthetic motion")
    p.add_argument("--kind", choices=KINDS, default="walk")
    p.add_argument("--duration", type=float, default=4.0, help="seconds")
    p.add_argument("--fps", type=int, default=60)
    p.set_defaults(func=cmd_genmotion)

    p = sub.add_parser("synth", parents=[common], help="synthesize virtual IMU tracks")
    p.add_argument("--motion", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--joint", type=int, help="joint IMU of this joint")
    which.add_argument("--vertex", type=int, help="mesh IMU at this vertex")
    which.add_argument("--devices", help="device file; writes <name>.imu per device into --out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train phase 1 or phase 2")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--corpus", nargs="+", default=[], help="motion files")
    p.add_argument("--checkpoint", help="resume from (phase 1) or start from (phase 2)")
    p.add_argument("--log", help="loss log path (default: <out>.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("losstable", parents=[common], help="build the node/vertex loss table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True, help="held-out motion files")
    p.add_argument("--stride", type=int, default=8, help="evaluate every n-th vertex")
    p.set_defaults(func=cmd_losstable)

    p = sub.add_parser("assign", parents=[common], help="assign devices to joint nodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--devices", required=True)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("infer", parents=[common], help="estimate full-body pose")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--devices", required=True)
    p.add_argument("--tracks", nargs="+", help="IMU track files in device order")
    p.add_argument("--motion", help="synthesize device tracks from this motion instead")
    p.add_argument("--zero-coordinates", action="store_true", help="withhold placement coordinates")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score a pose estimate or a device set")
    p.add_argument("--motion", nargs="+", default=[], help="ground-truth motion file(s)")
    p.add_argument("--pose", help="pose file written by 'infer'")
    p.add_argument("--checkpoint")
    p.add_argument("--table")
    p.add_argument("--devices")
    p.add_argument("--zero-coordinates", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="GAE over placement variants")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--placements", required=True, help="one variant per line: label x y z [x y z ...]")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--zero-coordinates", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.seed is None and args.command == "genmotion":
        args.seed = 0
    try:
        args.func(args)
    except (ImucocoError, OSError) as exc:
        print(f"imucoco {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
