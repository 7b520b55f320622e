"""Virtual IMU synthesis at mesh vertices and joints.

Accelerations are second central differences of world positions (no gravity
term) and stay in the world frame.  Orientations are calibrated against the
reading at a T-pose frame: ``out[t] = raw[t] * raw[t_pose]^-1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .body import LEAF_JOINTS, NUM_JOINTS, BodyModel, GlobalTransforms, forward_kinematics, skin_vertices
from .errors import ParseError, ValidationError
from .motion import MotionSequence
from .rotations import (
    check_unit,
    identity_quat,
    matrix_to_6d,
    matrix_to_quat,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
)

ACCEL_SCALE = 9.81
PLACEMENT_MARGIN = 0.05
DEGENERATE_TOL = 1e-8

# trajectory source of each joint node: the primary child joint, or -1 for
# leaf joints whose trajectory comes from their extension vertex
PRIMARY_CHILD = np.array(
    [3, 4, 5, 6, 7, 8, 9, 10, 11, 12, -1, -1, 15, 16, 17, -1, 18, 19, 20, 21, 22, 23, -1, -1]
)


class PlacementCoordinate(NamedTuple):
    r: np.ndarray
    region_k: int


def check_placement(body: BodyModel, placement: PlacementCoordinate) -> None:
    r = np.asarray(placement.r, dtype=float)
    if r.shape != (3,):
        raise ValidationError(f"placement must be a 3-vector, got shape {r.shape}")
    lo, hi = body.r_min - PLACEMENT_MARGIN, body.r_max + PLACEMENT_MARGIN
    for axis, name in enumerate("xyz"):
        if not lo[axis] <= r[axis] <= hi[axis]:
            raise ValidationError(f"placement {name}={r[axis]:.4f} outside [{lo[axis]:.4f}, {hi[axis]:.4f}]")
    if not 0 <= int(placement.region_k) < NUM_JOINTS:
        raise ValidationError(f"region {placement.region_k} outside 0..23")


@dataclass(frozen=True, eq=False)
class ImuTrack:
    placement: PlacementCoordinate
    accel: np.ndarray  # (T, 3) m/s^2, world frame
    orient: np.ndarray  # (T, 4) calibrated
    fps: int
    tpose_orient: np.ndarray = field(default_factory=lambda: identity_quat())
    # True when some frame needed the degenerate orientation fallback
    degenerate: bool = False

    @property
    def frame_count(self) -> int:
        return len(self.accel)

    @property
    def raw_orient(self) -> np.ndarray:
        return quat_mul(self.orient, self.tpose_orient)

    def with_placement(self, placement: PlacementCoordinate) -> "ImuTrack":
        return ImuTrack(placement, self.accel, self.orient, self.fps, self.tpose_orient, self.degenerate)


@dataclass(frozen=True)
class KinematicsGT:
    """Per-joint kinematic targets; joint axis is the second axis."""

    velocity: np.ndarray  # (T, 24, 3)
    position: np.ndarray  # (T, 24, 3) root-centered
    local_orientation: np.ndarray  # (T, 24, 6)
    global_orientation: np.ndarray  # (T, 24, 6)
    root_velocity: np.ndarray  # (T, 3) root displacement per frame, meters

    @property
    def frame_count(self) -> int:
        return len(self.root_velocity)

    @property
    def pose(self) -> np.ndarray:
        """Full-body target for the pose regressor, (T, 144)."""
        return self.global_orientation.reshape(self.frame_count, NUM_JOINTS * 6)

    def window(self, start: int, stop: int) -> "KinematicsGT":
        return KinematicsGT(
            self.velocity[start:stop],
            self.position[start:stop],
            self.local_orientation[start:stop],
            self.global_orientation[start:stop],
            self.root_velocity[start:stop],
        )


def central_first_difference(p: np.ndarray, fps: float) -> np.ndarray:
    """Central difference along axis 0; endpoints copy the nearest interior value."""
    out = np.empty_like(p, dtype=float)
    out[1:-1] = (p[2:] - p[:-2]) * (0.5 * fps)
    out[0], out[-1] = out[1], out[-2]
    return out


def central_second_difference(p: np.ndarray, fps: float) -> np.ndarray:
    out = np.empty_like(p, dtype=float)
    out[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) * float(fps) ** 2
    out[0], out[-1] = out[1], out[-2]
    return out


def frame_from_normal_and_bone(y, b):
    """Orientation frame with columns (x, y, z) from a surface normal and bone direction.

    ``y`` must be unit length.  Returns (frames, degenerate mask); degenerate
    entries are left as NaN for the caller to resolve.
    """
    y = np.asarray(y, dtype=float)
    z = np.cross(b, y)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < DEGENERATE_TOL
    with np.errstate(invalid="ignore", divide="ignore"):
        z = z / norm
    x = np.cross(y, z)
    frames = np.stack([x, y, z], axis=-1)
    frames[degenerate] = np.nan
    return frames, degenerate


def _complete_from_z(y, z_hint):
    z = z_hint - (z_hint @ y) * y
    n = np.linalg.norm(z)
    if n < DEGENERATE_TOL:
        return None
    z = z / n
    return np.stack([np.cross(y, z), y, z], axis=-1)


def _fixed_completion(y, axes):
    """Complete ``y`` with the first column of ``axes`` well away from it.

    ``axes`` is the driving joint's global rotation, so the result turns
    with the body.  A fixed threshold (rather than the least aligned
    column) keeps the choice stable when columns tie.
    """
    # some column of an orthonormal basis has |cos| <= 1/sqrt(3)
    k = int(np.flatnonzero(np.abs(y @ axes) < 0.9)[0])
    return _complete_from_z(y, axes[:, k])


def _vertex_normals(body: BodyModel, posed: np.ndarray, vertex_ids, local_index) -> np.ndarray:
    """Unit mean of incident face normals; ``posed`` holds positions of needed vertices."""
    out = np.zeros(posed.shape[:-2] + (len(vertex_ids), 3))
    faces = body.mesh.faces
    for k, v in enumerate(vertex_ids):
        f = local_index[faces[body.vertex_faces[v]]]
        a, b, c = posed[..., f[:, 0], :], posed[..., f[:, 1], :], posed[..., f[:, 2], :]
        n = np.cross(b - a, c - a)
        n = n / np.linalg.norm(n, axis=-1, keepdims=True)
        out[..., k, :] = n.sum(axis=-2)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _needed_vertices(body: BodyModel, vertex_ids):
    needed = set(int(v) for v in vertex_ids)
    for v in vertex_ids:
        needed.update(body.mesh.faces[body.vertex_faces[v]].ravel().tolist())
    needed = np.array(sorted(needed))
    local_index = np.full(body.vertex_count, -1)
    local_index[needed] = np.arange(len(needed))
    return needed, local_index


def _check_vertices(body: BodyModel, vertex_ids) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(vertex_ids))
    if ids.size and (ids.min() < 0 or ids.max() >= body.vertex_count):
        raise ValidationError(f"vertex id outside 0..{body.vertex_count - 1}")
    return ids.astype(int)


def vertex_frames(body: BodyModel, vertex_ids, transforms: GlobalTransforms):
    """Raw orientation frames (T, n, 3, 3) and positions (T, n, 3) of vertices.

    ``transforms`` carries a leading time axis.  Degenerate frames fall back
    to the previous frame's z axis projected orthogonal to y, or at t = 0 to
    a completion fixed relative to the driving joint.  Also returns a
    per-vertex degenerate flag.
    """
    ids = _check_vertices(body, vertex_ids)
    needed, local_index = _needed_vertices(body, ids)
    posed = skin_vertices(body, transforms, needed)
    if posed.ndim == 2:
        posed = posed[None]
        transforms = GlobalTransforms(transforms.rotation[None], transforms.position[None])
    y = _vertex_normals(body, posed, ids, local_index)
    bone = body.mesh.bone_of_vertex[ids]
    parent = body.skeleton.parent[bone]
    b = transforms.position[:, bone] - transforms.position[:, parent]
    frames, degenerate = frame_from_normal_and_bone(y, b)
    flagged = degenerate.any(axis=0)
    for k in np.flatnonzero(flagged):
        for t in range(len(frames)):
            if not degenerate[t, k]:
                continue
            frame = None if t == 0 else _complete_from_z(y[t, k], frames[t - 1, k][:, 2])
            frames[t, k] = _fixed_completion(y[t, k], transforms.rotation[t, parent[k]]) if frame is None else frame
    return frames, posed[:, local_index[ids]], flagged


def vertex_orientation_frame(body: BodyModel, vertex_id: int, transforms: GlobalTransforms) -> np.ndarray:
    """Orientation of one vertex; (3, 3) for a single frame or (T, 3, 3)."""
    single = transforms.rotation.ndim == 3
    frames, _, _ = vertex_frames(body, [vertex_id], transforms)
    return frames[0, 0] if single else frames[:, 0]


def calibrate(raw_orient, tpose_orient):
    """``raw[t] * tpose^-1`` for unit quaternions."""
    return quat_mul(np.asarray(raw_orient, dtype=float), quat_conj(tpose_orient))


def posed(body: BodyModel, motion: MotionSequence) -> GlobalTransforms:
    return forward_kinematics(body.skeleton, motion)


def _tracks_from(positions, raw_quat, placements, fps, calibration_frame, flags):
    accel = central_second_difference(positions, fps)
    tracks = []
    for k, placement in enumerate(placements):
        tpose = raw_quat[calibration_frame, k]
        orient = quat_normalize(calibrate(raw_quat[:, k], tpose))
        tracks.append(ImuTrack(placement, accel[:, k], orient, fps, tpose, bool(flags[k])))
    return tracks


def synthesize_mesh_imus(
    body: BodyModel,
    motion: MotionSequence,
    vertex_ids,
    transforms: GlobalTransforms | None = None,
    calibration_frame: int = 0,
) -> list[ImuTrack]:
    """Mesh virtual IMUs for several vertices at once."""
    ids = _check_vertices(body, vertex_ids)
    transforms = posed(body, motion) if transforms is None else transforms
    frames, positions, flags = vertex_frames(body, ids, transforms)
    placements = [
        PlacementCoordinate(body.mesh.vertices_rest[v].copy(), int(body.mesh.region[v])) for v in ids
    ]
    return _tracks_from(positions, matrix_to_quat(frames), placements, motion.fps, calibration_frame, flags)


def synthesize_mesh_imu(body: BodyModel, motion: MotionSequence, vertex_id: int, **kwargs) -> ImuTrack:
    if not 0 <= int(vertex_id) < body.vertex_count:
        raise ValidationError(f"vertex {vertex_id} outside 0..{body.vertex_count - 1}")
    return synthesize_mesh_imus(body, motion, [vertex_id], **kwargs)[0]


class LeafVertex(NamedTuple):
    vertex_id: int
    joint: int
    rest_position: np.ndarray


def leaf_extension_vertices(body: BodyModel) -> list[LeafVertex]:
    """Head-top, left/right fingertip and left/right toe vertices."""
    return [
        LeafVertex(v, j, body.mesh.vertices_rest[v].copy())
        for v, j in zip(body.extension_vertices, LEAF_JOINTS)
    ]


def _trajectory_vertex(body: BodyModel, joint: int) -> int:
    return body.extension_vertices[LEAF_JOINTS.index(joint)]


def joint_source_positions(body: BodyModel, transforms: GlobalTransforms) -> np.ndarray:
    """World positions (T, 24, 3) each joint node samples its trajectory from."""
    out = np.empty(transforms.position.shape)
    non_leaf = PRIMARY_CHILD >= 0
    out[..., non_leaf, :] = transforms.position[..., PRIMARY_CHILD[non_leaf], :]
    leaves = np.flatnonzero(~non_leaf)
    verts = [_trajectory_vertex(body, j) for j in leaves]
    out[..., leaves, :] = skin_vertices(body, transforms, verts)
    return out


def joint_placement(body: BodyModel, joint: int) -> PlacementCoordinate:
    """T-pose coordinate of a joint node's trajectory source; region is the joint itself."""
    child = PRIMARY_CHILD[joint]
    if child >= 0:
        r = body.tpose_joint_pos[child].copy()
    else:
        r = body.mesh.vertices_rest[_trajectory_vertex(body, joint)].copy()
    return PlacementCoordinate(r, int(joint))


def synthesize_joint_imus(
    body: BodyModel,
    motion: MotionSequence,
    transforms: GlobalTransforms | None = None,
    calibration_frame: int = 0,
) -> list[ImuTrack]:
    """All 24 joint virtual IMUs: child-sampled trajectory, own orientation."""
    transforms = posed(body, motion) if transforms is None else transforms
    positions = joint_source_positions(body, transforms)
    raw = matrix_to_quat(transforms.rotation)
    placements = [joint_placement(body, j) for j in range(NUM_JOINTS)]
    return _tracks_from(positions, raw, placements, motion.fps, calibration_frame, np.zeros(NUM_JOINTS, bool))


def synthesize_joint_imu(body: BodyModel, motion: MotionSequence, joint: int, **kwargs) -> ImuTrack:
    if not 0 <= int(joint) < NUM_JOINTS:
        raise ValidationError(f"joint {joint} outside 0..23")
    return synthesize_joint_imus(body, motion, **kwargs)[joint]


def encode_channels(track: ImuTrack, accel_scale: float = ACCEL_SCALE) -> np.ndarray:
    """(T, 9): scaled acceleration then the 6D calibrated orientation."""
    rot = quat_to_matrix(track.orient)
    return np.concatenate([track.accel / accel_scale, matrix_to_6d(rot)], axis=-1)


def kinematics_ground_truth(
    body: BodyModel, motion: MotionSequence, transforms: GlobalTransforms | None = None
) -> KinematicsGT:
    transforms = posed(body, motion) if transforms is None else transforms
    source = joint_source_positions(body, transforms)
    local = quat_to_matrix(quat_normalize(motion.local_rotation))
    return KinematicsGT(
        velocity=central_first_difference(source, motion.fps),
        position=source - transforms.position[:, :1, :],
        local_orientation=matrix_to_6d(local),
        global_orientation=matrix_to_6d(transforms.rotation),
        root_velocity=central_first_difference(np.asarray(motion.root_translation, float), 1.0),
    )


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def write_imutrack(track: ImuTrack, path) -> None:
    lines = [
        f"fps {track.fps}",
        f"T {track.frame_count}",
        f"placement {_fmt(track.placement.r)}",
        f"region {int(track.placement.region_k)}",
        f"tpose {_fmt(track.tpose_orient)}",
    ]
    for t in range(track.frame_count):
        lines.append(_fmt(np.concatenate([track.accel[t], track.orient[t]])))
    Path(path).write_text("\n".join(lines) + "\n")


def read_imutrack(path) -> ImuTrack:
    path = Path(path)
    lines = path.read_text().splitlines()
    header: dict[str, list[str]] = {}
    expected = ("fps", "T", "placement", "region")
    i = 0
    while i < len(lines) and lines[i].split() and lines[i].split()[0] in expected + ("tpose",):
        key, *rest = lines[i].split()
        header[key] = rest
        i += 1
    for key in expected:
        if key not in header:
            raise ParseError(f"missing header field {key!r}", path, i + 1)
    try:
        fps, frames = int(header["fps"][0]), int(header["T"][0])
        r = np.array([float(x) for x in header["placement"]])
        region = int(header["region"][0])
        tpose = np.array([float(x) for x in header["tpose"]]) if "tpose" in header else identity_quat()
    except (ValueError, IndexError):
        raise ParseError("malformed header", path, i) from None
    if r.shape != (3,) or tpose.shape != (4,):
        raise ParseError("placement needs 3 values and tpose 4", path, i)
    body = lines[i:]
    if len(body) < frames:
        raise ParseError(f"truncated: expected {frames} frame lines, found {len(body)}", path, len(lines) + 1)
    data = np.empty((frames, 7))
    for k in range(frames):
        tokens = body[k].split()
        if len(tokens) != 7:
            raise ParseError(f"expected 7 values, got {len(tokens)}", path, i + k + 1)
        try:
            data[k] = [float(x) for x in tokens]
        except ValueError:
            raise ParseError("non-numeric value", path, i + k + 1) from None
    try:
        check_unit(data[:, 3:], "track orientation")
    except ValidationError as exc:
        raise ParseError(str(exc), path) from exc
    return ImuTrack(PlacementCoordinate(r, region), data[:, :3], data[:, 3:], fps, tpose)
