"""Metrics, end-to-end inference and placement sweeps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .body import NUM_JOINTS, BodyModel, nearest_vertex, region_of_point
from .errors import FingerprintError, ParseError, ValidationError
from .matchmaker import Device, LossTable, assign_devices, make_devices
from .motion import MotionSequence
from .network import Model, decode_pose, forward_nodes, pr_forward
from .rotations import matrix_to_6d
from .vimu import ImuTrack, PlacementCoordinate, encode_channels, posed, synthesize_mesh_imus

# root, feet, wrists and hands
DEFAULT_MASK = (0, 10, 11, 20, 21, 22, 23)


def joint_angles(pred, gt) -> np.ndarray:
    """Geodesic angle in degrees between rotation matrices, elementwise over leading axes."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-2:] != (3, 3):
        raise ValidationError(f"rotation shapes {pred.shape} and {gt.shape} must match and end in (3, 3)")
    trace = np.einsum("...ij,...ij->...", gt, pred)  # trace(gt^T pred)
    return np.degrees(np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0)))


def global_angular_error(pred, gt, mask=DEFAULT_MASK) -> float:
    """Mean angle over frames and the joints not in ``mask``; inputs (T, 24, 3, 3)."""
    keep = np.setdiff1d(np.arange(NUM_JOINTS), np.asarray(mask, dtype=int))
    if len(keep) == 0:
        raise ValidationError("mask excludes every joint")
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape[-3] != NUM_JOINTS:
        raise ValidationError(f"expected {NUM_JOINTS} joints, got shape {pred.shape}")
    return float(np.mean(joint_angles(pred[..., keep, :, :], gt[..., keep, :, :])))


def cumulative_translation_error(pred_trans, gt_trans) -> np.ndarray:
    """Per-frame distance after shifting both series to start at the origin."""
    pred_trans, gt_trans = np.asarray(pred_trans, float), np.asarray(gt_trans, float)
    if pred_trans.shape != gt_trans.shape:
        raise ValidationError(f"translation series differ in shape: {pred_trans.shape} vs {gt_trans.shape}")
    return np.linalg.norm((pred_trans - pred_trans[0]) - (gt_trans - gt_trans[0]), axis=-1)


@dataclass
class PoseEstimate:
    rotations: np.ndarray  # (T, 24, 3, 3)
    translation: np.ndarray  # (T, 3)
    fps: int

    @property
    def frame_count(self) -> int:
        return len(self.translation)


def zeroed_placement(body: BodyModel) -> PlacementCoordinate:
    """Placement used when coordinates are withheld: the origin and its region."""
    return PlacementCoordinate(np.zeros(3), region_of_point(body, np.zeros(3)))


def infer_pose(
    model: Model,
    table: LossTable,
    devices: Sequence[Device],
    tracks: Sequence[ImuTrack],
    body: BodyModel,
    zero_coordinates: bool = False,
) -> tuple[PoseEstimate, list[int]]:
    """Assign devices to nodes, run every node on its device and regress the pose.

    With ``zero_coordinates`` the nodes see a fixed placement at the origin
    instead of the device's coordinate; assignment still uses the true one.
    """
    if model.body_fingerprint != body.fingerprint:
        raise FingerprintError(f"checkpoint was trained on body {model.body_fingerprint}, session body is {body.fingerprint}")
    table.check(body, model)
    if len(tracks) != len(devices):
        raise ValidationError(f"{len(devices)} devices but {len(tracks)} tracks")
    rates = {t.fps for t in tracks}
    lengths = {t.frame_count for t in tracks}
    if len(rates) != 1:
        raise ValidationError(f"tracks disagree on frame rate: {sorted(rates)}")
    if len(lengths) != 1:
        raise ValidationError(f"tracks disagree on length: {sorted(lengths)}")
    assignment = assign_devices(table, devices, body)
    slot = {d.id: i for i, d in enumerate(devices)}
    channels = np.stack([encode_channels(tracks[slot[d]]) for d in assignment])
    if zero_coordinates:
        placements = [zeroed_placement(body)] * NUM_JOINTS
    else:
        placements = [devices[slot[d]].placement for d in assignment]
    with ad.no_grad():
        out = forward_nodes(model, body, np.arange(NUM_JOINTS), channels, placements)
        pose = pr_forward(model.pr, out.z).data
    root_step = out.preds["root_velocity"].data.mean(axis=0)
    estimate = PoseEstimate(decode_pose(pose), np.cumsum(root_step, axis=0), rates.pop())
    return estimate, assignment


def device_tracks(body: BodyModel, motion: MotionSequence, devices: Sequence[Device], transforms=None) -> list[ImuTrack]:
    """Virtual IMUs at each device's nearest vertex, labelled with the device's coordinate."""
    verts = [nearest_vertex(body, d.placement.r) for d in devices]
    tracks = synthesize_mesh_imus(body, motion, verts, transforms)
    return [t.with_placement(d.placement) for t, d in zip(tracks, devices)]


class SequenceScore(NamedTuple):
    gae: float
    translation_error: float  # meters at the last frame
    estimate: PoseEstimate
    assignment: list[int]


def score_estimate(estimate: PoseEstimate, body: BodyModel, motion: MotionSequence, transforms=None) -> tuple[float, float]:
    transforms = posed(body, motion) if transforms is None else transforms
    if estimate.frame_count != motion.frame_count:
        raise ValidationError(f"estimate has {estimate.frame_count} frames, motion has {motion.frame_count}")
    gae = global_angular_error(estimate.rotations, transforms.rotation)
    err = cumulative_translation_error(estimate.translation, motion.root_translation)
    return gae, float(err[-1])


def evaluate_sequence(
    model: Model,
    table: LossTable,
    body: BodyModel,
    motion: MotionSequence,
    devices: Sequence[Device],
    zero_coordinates: bool = False,
) -> SequenceScore:
    transforms = posed(body, motion)
    tracks = device_tracks(body, motion, devices, transforms)
    estimate, assignment = infer_pose(model, table, devices, tracks, body, zero_coordinates)
    gae, trans = score_estimate(estimate, body, motion, transforms)
    return SequenceScore(gae, trans, estimate, assignment)


class SweepRow(NamedTuple):
    label: str
    gae: float
    translation_error: float


def placement_sweep(
    model: Model,
    table: LossTable,
    body: BodyModel,
    corpus: Sequence[MotionSequence],
    variants: Sequence[tuple[str, np.ndarray]],
    zero_coordinates: bool = False,
) -> list[SweepRow]:
    """GAE and final translation error per placement variant, averaged over ``corpus``."""
    if len(corpus) == 0:
        raise ValidationError("sweep needs at least one motion")
    rows = []
    for label, coords in variants:
        devices = make_devices(body, coords)
        scores = [evaluate_sequence(model, table, body, m, devices, zero_coordinates) for m in corpus]
        rows.append(SweepRow(label, float(np.mean([s.gae for s in scores])), float(np.mean([s.translation_error for s in scores]))))
    return rows


def format_report(rows: Sequence[SweepRow]) -> str:
    lines = ["placement gae_deg translation_m"]
    lines += [f"{r.label} {r.gae:.2f} {r.translation_error:.3f}" for r in rows]
    return "\n".join(lines) + "\n"


# ----- text formats ---------------------------------------------------------------


def _data_lines(path):
    path = Path(path)
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield path, lineno, line.split()


def _floats(fields, path, lineno):
    try:
        return [float(x) for x in fields]
    except ValueError:
        raise ParseError(f"non-numeric coordinate in {' '.join(fields)!r}", path, lineno) from None


def read_devices(path) -> tuple[list[str], np.ndarray]:
    """Device file: one ``name x y z`` line per device (T-pose meters)."""
    names, coords = [], []
    for p, lineno, fields in _data_lines(path):
        if len(fields) != 4:
            raise ParseError(f"expected 'name x y z', got {len(fields)} fields", p, lineno)
        names.append(fields[0])
        coords.append(_floats(fields[1:], p, lineno))
    if not names:
        raise ParseError("no devices listed", path, None)
    if len(set(names)) != len(names):
        raise ParseError("device names must be unique", path, None)
    return names, np.array(coords)


def write_devices(path, names: Sequence[str], coords) -> None:
    coords = np.asarray(coords, float).reshape(-1, 3)
    Path(path).write_text("".join(f"{n} {x!r} {y!r} {z!r}\n" for n, (x, y, z) in zip(names, coords.tolist())))


def read_placements(path) -> list[tuple[str, np.ndarray]]:
    """Sweep file: one variant per line, ``label x y z [x y z ...]``."""
    out = []
    for p, lineno, fields in _data_lines(path):
        if len(fields) < 4 or (len(fields) - 1) % 3:
            raise ParseError("expected 'label x y z [x y z ...]'", p, lineno)
        out.append((fields[0], np.array(_floats(fields[1:], p, lineno)).reshape(-1, 3)))
    if not out:
        raise ParseError("no placements listed", path, None)
    return out


def write_placements(path, variants) -> None:
    lines = []
    for label, coords in variants:
        vals = " ".join(repr(float(x)) for x in np.asarray(coords, float).reshape(-1))
        lines.append(f"{label} {vals}\n")
    Path(path).write_text("".join(lines))


def write_pose(estimate: PoseEstimate, path) -> None:
    """Header ``fps N frames T``; then per frame 3 translation values and 144 6D values."""
    sixd = matrix_to_6d(estimate.rotations).reshape(estimate.frame_count, NUM_JOINTS * 6)
    rows = np.concatenate([estimate.translation, sixd], axis=1)
    body = "".join(" ".join(format(x, ".17g") for x in row) + "\n" for row in rows)
    Path(path).write_text(f"fps {estimate.fps} frames {estimate.frame_count}\n{body}")


def read_pose(path) -> PoseEstimate:
    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[0] != "fps" or head[2] != "frames":
        raise ParseError("expected header 'fps N frames T'", path, 1)
    try:
        fps, frames = int(head[1]), int(head[3])
    except ValueError:
        raise ParseError("fps and frames must be integers", path, 1) from None
    if len(lines) - 1 != frames:
        raise ParseError(f"header promises {frames} frames, found {len(lines) - 1}", path, len(lines))
    rows = np.empty((frames, 3 + NUM_JOINTS * 6))
    for i, line in enumerate(lines[1:]):
        vals = _floats(line.split(), path, i + 2)
        if len(vals) != rows.shape[1]:
            raise ParseError(f"expected {rows.shape[1]} values, found {len(vals)}", path, i + 2)
        rows[i] = vals
    return PoseEstimate(decode_pose(rows[:, 3:]), rows[:, :3], fps)
