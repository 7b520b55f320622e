"""Canonical articulated body: skeleton, forward kinematics, skinned mesh.

The body follows the 24-joint SMPL topology with y up, x towards the body's
left and z forwards.  The surface is a set of capped cylinders, one per bone
plus one collinear extension beyond each leaf joint (head, hands, feet).  The
five distal poles of those extensions are the leaf extension vertices and are
always the last five vertices of the mesh.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .config import dataclass_from_kv, format_kv, read_kv
from .errors import ConfigurationError, ValidationError
from .rotations import check_unit, quat_normalize, quat_to_matrix

NUM_JOINTS = 24

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)  # fmt: skip

PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)

# head-top, left/right fingertip, left/right toe tip
LEAF_JOINTS = (15, 22, 23, 10, 11)


@dataclass(frozen=True)
class BodyConfig:
    """Bone lengths and radii in meters plus mesh resolution.

    The defaults give a 1.7 m adult-like figure and a mesh of
    ``DEFAULT_VERTEX_COUNT`` vertices.
    """

    hip_half_width: float = 0.09
    hip_drop: float = 0.08
    spine1: float = 0.11
    spine2: float = 0.13
    spine3: float = 0.06
    thigh: float = 0.40
    shank: float = 0.40
    foot_drop: float = 0.06
    foot_forward: float = 0.12
    upper_chest: float = 0.21
    neck: float = 0.10
    collar_width: float = 0.07
    collar_rise: float = 0.12
    shoulder_width: float = 0.11
    upper_arm: float = 0.28
    forearm: float = 0.26
    hand: float = 0.08
    head_top_extension: float = 0.12
    fingertip_extension: float = 0.10
    toe_extension: float = 0.08
    radius_torso: float = 0.13
    radius_hip: float = 0.08
    radius_thigh: float = 0.075
    radius_shank: float = 0.05
    radius_foot: float = 0.04
    radius_neck: float = 0.05
    radius_head: float = 0.09
    radius_collar: float = 0.05
    radius_upper_arm: float = 0.045
    radius_forearm: float = 0.035
    radius_hand: float = 0.03
    ring_vertices: int = 8
    segments: int = 6
    skin_power: float = 4.0

    def validate(self) -> None:
        if self.ring_vertices < 3:
            raise ConfigurationError(f"ring_vertices must be >= 3, got {self.ring_vertices}")
        if self.segments < 3:
            raise ConfigurationError(f"segments must be >= 3, got {self.segments}")
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name.startswith("radius_") and not value > 0:
                raise ConfigurationError(f"{f.name} must be > 0, got {value}")
        lengths = ("thigh", "shank", "upper_arm", "forearm", "hand", "neck", "spine1", "spine2", "spine3")
        for name in lengths:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if not self.skin_power > 0:
            raise ConfigurationError("skin_power must be > 0")

    @classmethod
    def from_file(cls, path) -> "BodyConfig":
        return dataclass_from_kv(cls, read_kv(path))

    def to_text(self) -> str:
        return format_kv(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


# 28 capped cylinders x (segments + 1 rings x ring_vertices + 2 poles)
DEFAULT_VERTEX_COUNT = 28 * (7 * 8 + 2)


@dataclass(frozen=True)
class Skeleton:
    parent: np.ndarray
    rest_offset: np.ndarray
    joint_count: int = NUM_JOINTS

    @cached_property
    def depth(self) -> np.ndarray:
        depth = np.zeros(self.joint_count, dtype=int)
        for j in range(1, self.joint_count):
            depth[j] = depth[self.parent[j]] + 1
        return depth

    @cached_property
    def hops(self) -> np.ndarray:
        """All-pairs tree distance, ``hops[a, b]``."""
        n = self.joint_count
        out = np.zeros((n, n), dtype=int)
        ancestors = []
        for j in range(n):
            chain = [j]
            while self.parent[chain[-1]] >= 0:
                chain.append(int(self.parent[chain[-1]]))
            ancestors.append(chain)
        for a in range(n):
            up_a = {joint: i for i, joint in enumerate(ancestors[a])}
            for b in range(n):
                for i, joint in enumerate(ancestors[b]):
                    if joint in up_a:
                        out[a, b] = up_a[joint] + i
                        break
        return out

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parent == j)]


class PoseFrame(NamedTuple):
    local_rotation: np.ndarray  # (24, 4) wxyz
    root_translation: np.ndarray  # (3,)


class GlobalTransforms(NamedTuple):
    rotation: np.ndarray  # (..., 24, 3, 3)
    position: np.ndarray  # (..., 24, 3)


@dataclass(frozen=True)
class BodyMesh:
    vertices_rest: np.ndarray
    faces: np.ndarray
    skin_weights: np.ndarray
    region: np.ndarray
    bone_of_vertex: np.ndarray
    # compact two-joint form of skin_weights
    weight_joints: np.ndarray
    weight_values: np.ndarray

    @property
    def vertex_count(self) -> int:
        return len(self.vertices_rest)


@dataclass(frozen=True)
class BodyModel:
    skeleton: Skeleton
    mesh: BodyMesh
    tpose_joint_pos: np.ndarray
    r_min: np.ndarray
    r_max: np.ndarray
    config: BodyConfig = field(repr=False)
    extension_vertices: tuple[int, ...] = ()

    @property
    def vertex_count(self) -> int:
        return self.mesh.vertex_count

    @cached_property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    @cached_property
    def vertex_area(self) -> np.ndarray:
        """Rest-pose area attributed to each vertex (a third of each incident face)."""
        v = self.mesh.vertices_rest
        f = self.mesh.faces
        area = 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
        out = np.zeros(len(v))
        for k in range(3):
            np.add.at(out, f[:, k], area / 3.0)
        return out

    @cached_property
    def vertex_faces(self) -> list[np.ndarray]:
        incident: list[list[int]] = [[] for _ in range(self.vertex_count)]
        for fi, face in enumerate(self.mesh.faces):
            for v in face:
                incident[v].append(fi)
        return [np.array(x, dtype=int) for x in incident]


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def build_skeleton(config: BodyConfig) -> Skeleton:
    c = config
    off = np.zeros((NUM_JOINTS, 3))
    off[1] = (c.hip_half_width, -c.hip_drop, 0.0)
    off[2] = (-c.hip_half_width, -c.hip_drop, 0.0)
    off[3] = (0.0, c.spine1, 0.0)
    off[4] = off[5] = (0.0, -c.thigh, 0.0)
    off[6] = (0.0, c.spine2, 0.0)
    off[7] = off[8] = (0.0, -c.shank, 0.0)
    off[9] = (0.0, c.spine3, 0.0)
    off[10] = off[11] = (0.0, -c.foot_drop, c.foot_forward)
    off[12] = (0.0, c.upper_chest, 0.0)
    off[13] = (c.collar_width, c.collar_rise, 0.0)
    off[14] = (-c.collar_width, c.collar_rise, 0.0)
    off[15] = (0.0, c.neck, 0.0)
    off[16] = (c.shoulder_width, 0.0, 0.0)
    off[17] = (-c.shoulder_width, 0.0, 0.0)
    off[18] = (c.upper_arm, 0.0, 0.0)
    off[19] = (-c.upper_arm, 0.0, 0.0)
    off[20] = (c.forearm, 0.0, 0.0)
    off[21] = (-c.forearm, 0.0, 0.0)
    off[22] = (c.hand, 0.0, 0.0)
    off[23] = (-c.hand, 0.0, 0.0)
    parent = PARENTS.copy()
    _freeze(off, parent)
    return Skeleton(parent=parent, rest_offset=off)


def _bone_radius(c: BodyConfig, j: int) -> float:
    table = {
        1: c.radius_hip, 2: c.radius_hip, 3: c.radius_torso, 6: c.radius_torso, 9: c.radius_torso,
        12: c.radius_torso, 4: c.radius_thigh, 5: c.radius_thigh, 7: c.radius_shank,
        8: c.radius_shank, 10: c.radius_foot, 11: c.radius_foot, 13: c.radius_collar,
        14: c.radius_collar, 15: c.radius_neck, 16: c.radius_collar, 17: c.radius_collar,
        18: c.radius_upper_arm, 19: c.radius_upper_arm, 20: c.radius_forearm,
        21: c.radius_forearm, 22: c.radius_hand, 23: c.radius_hand,
    }  # fmt: skip
    return table[j]


def _leaf_radius(c: BodyConfig, j: int) -> float:
    return {15: c.radius_head, 22: c.radius_hand, 23: c.radius_hand, 10: c.radius_foot, 11: c.radius_foot}[j]


def _leaf_extension(c: BodyConfig, j: int) -> float:
    return {15: c.head_top_extension, 22: c.fingertip_extension, 23: c.fingertip_extension,
            10: c.toe_extension, 11: c.toe_extension}[j]  # fmt: skip


def _perpendicular_basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = axis / np.linalg.norm(axis)
    ref = np.eye(3)[np.argmin(np.abs(a))]
    u = np.cross(a, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(a, u)


def _point_segment_distance(points: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    d = end - start
    s = np.clip((points - start) @ d / (d @ d), 0.0, 1.0)
    return np.linalg.norm(points - (start + s[:, None] * d), axis=1)


def build_canonical_body(config: BodyConfig | None = None) -> BodyModel:
    """Generate the canonical body deterministically from ``config``."""
    config = config or BodyConfig()
    config.validate()
    skeleton = build_skeleton(config)
    tpose = np.zeros((NUM_JOINTS, 3))
    for j in range(1, NUM_JOINTS):
        tpose[j] = tpose[skeleton.parent[j]] + skeleton.rest_offset[j]

    # (bone joint, driving joint, start, end, radius); leaf extensions last
    cylinders = []
    for j in range(1, NUM_JOINTS):
        p = skeleton.parent[j]
        cylinders.append((j, p, tpose[p], tpose[j], _bone_radius(config, j)))
    ext_points = []
    for j in LEAF_JOINTS:
        off = skeleton.rest_offset[j]
        tip = tpose[j] + off / np.linalg.norm(off) * _leaf_extension(config, j)
        ext_points.append(tip)
        cylinders.append((j, j, tpose[j], tip, _leaf_radius(config, j)))

    n_ring, n_seg = config.ring_vertices, config.segments
    per_cyl = (n_seg + 1) * n_ring + 2
    n_regular = len(cylinders) * per_cyl - len(LEAF_JOINTS)
    n_vertices = n_regular + len(LEAF_JOINTS)
    verts = np.zeros((n_vertices, 3))
    bone = np.zeros(n_vertices, dtype=int)
    home_cylinder = np.zeros(n_vertices, dtype=int)
    faces = []
    cursor = 0
    ext_ids = [n_regular + i for i in range(len(LEAF_JOINTS))]
    theta = 2.0 * np.pi * np.arange(n_ring) / n_ring
    for ci, (bj, _, start, end, radius) in enumerate(cylinders):
        axis = end - start
        u, w = _perpendicular_basis(axis)
        ring_ids = np.zeros((n_seg + 1, n_ring), dtype=int)
        for k in range(n_seg + 1):
            centre = start + axis * (k / n_seg)
            for i in range(n_ring):
                verts[cursor] = centre + radius * (np.cos(theta[i]) * u + np.sin(theta[i]) * w)
                bone[cursor], home_cylinder[cursor] = bj, ci
                ring_ids[k, i] = cursor
                cursor += 1
        start_pole = cursor
        verts[cursor], bone[cursor], home_cylinder[cursor] = start, bj, ci
        cursor += 1
        is_leaf_ext = ci >= NUM_JOINTS - 1
        if is_leaf_ext:
            end_pole = ext_ids[ci - (NUM_JOINTS - 1)]
        else:
            end_pole = cursor
            cursor += 1
        verts[end_pole], bone[end_pole], home_cylinder[end_pole] = end, bj, ci
        for k in range(n_seg):
            for i in range(n_ring):
                i2 = (i + 1) % n_ring
                a, b = ring_ids[k, i], ring_ids[k, i2]
                c, d = ring_ids[k + 1, i], ring_ids[k + 1, i2]
                faces.append((a, b, d))
                faces.append((a, d, c))
        for i in range(n_ring):
            i2 = (i + 1) % n_ring
            faces.append((start_pole, ring_ids[0, i2], ring_ids[0, i]))
            faces.append((end_pole, ring_ids[n_seg, i], ring_ids[n_seg, i2]))
    assert cursor == n_regular
    faces = np.array(faces, dtype=int)

    # orient every face outward from its own cylinder axis
    for fi, face in enumerate(faces):
        _, _, start, end, _ = cylinders[home_cylinder[face[0]]]
        tri = verts[face]
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        centroid = tri.mean(axis=0)
        d = end - start
        s = (centroid - start) @ d / (d @ d)
        outward = centroid - (start + np.clip(s, 0.0, 1.0) * d)
        if s < 1e-9 or s > 1 - 1e-9:
            # cap faces point along the axis, away from the cylinder
            outward = -d if s < 0.5 else d
        if n @ outward < 0:
            faces[fi] = face[[0, 2, 1]]

    weights, wj, wv = _skin_weights(verts, cylinders, config.skin_power, ext_ids)
    region = _argmax_region(weights)
    _freeze(verts, faces, weights, region, bone, wj, wv, tpose)
    mesh = BodyMesh(
        vertices_rest=verts,
        faces=faces,
        skin_weights=weights,
        region=region,
        bone_of_vertex=bone,
        weight_joints=wj,
        weight_values=wv,
    )
    r_min, r_max = verts.min(axis=0), verts.max(axis=0)
    _freeze(r_min, r_max)
    return BodyModel(
        skeleton=skeleton,
        mesh=mesh,
        tpose_joint_pos=tpose,
        r_min=r_min,
        r_max=r_max,
        config=config,
        extension_vertices=tuple(ext_ids),
    )


def _skin_weights(verts, cylinders, power, ext_ids):
    """Two nearest driving joints, weight proportional to (distance + eps)^-power.

    A joint's distance is the distance to the nearest bone segment it drives.
    """
    dist = np.full((len(verts), NUM_JOINTS), np.inf)
    for _, driver, start, end, _ in cylinders:
        dist[:, driver] = np.minimum(dist[:, driver], _point_segment_distance(verts, start, end))
    order = np.argsort(dist, axis=1, kind="stable")[:, :2]
    d2 = np.take_along_axis(dist, order, axis=1)
    raw = (d2 + 1e-4) ** (-power)
    # identical distances must give bit-identical weights
    raw[:, 1] = np.where(d2[:, 1] == d2[:, 0], raw[:, 0], raw[:, 1])
    w = raw / raw.sum(axis=1, keepdims=True)
    for i, v in enumerate(ext_ids):
        order[v] = (LEAF_JOINTS[i], LEAF_JOINTS[i])
        w[v] = (1.0, 0.0)
    dense = np.zeros((len(verts), NUM_JOINTS))
    rows = np.arange(len(verts))
    np.add.at(dense, (rows, order[:, 0]), w[:, 0])
    np.add.at(dense, (rows, order[:, 1]), w[:, 1])
    return dense, order, w


def _argmax_region(weights: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lower joint index
    return np.argmax(weights, axis=1)


def assign_regions(body: BodyModel) -> np.ndarray:
    """Region label per vertex: the joint with the largest skin weight."""
    return _argmax_region(body.mesh.skin_weights)


def hop_distance(skeleton: Skeleton, a: int, b: int) -> int:
    for name, j in (("a", a), ("b", b)):
        if not 0 <= int(j) < skeleton.joint_count:
            raise ValidationError(f"joint {name}={j} outside 0..{skeleton.joint_count - 1}")
    return int(skeleton.hops[a, b])


def forward_kinematics(skeleton: Skeleton, frame) -> GlobalTransforms:
    """Global joint transforms for one frame or a stack of frames.

    ``frame`` is anything with ``local_rotation`` (..., 24, 4) and
    ``root_translation`` (..., 3), e.g. a :class:`PoseFrame` or a
    :class:`~imucoco.motion.MotionSequence`.
    """
    q = np.asarray(frame.local_rotation, dtype=float)
    t = np.asarray(frame.root_translation, dtype=float)
    if q.shape[-2:] != (skeleton.joint_count, 4):
        raise ValidationError(f"local_rotation must end in (24, 4), got {q.shape}")
    check_unit(q, "local rotation")
    local = quat_to_matrix(quat_normalize(q))
    rot = np.empty_like(local)
    pos = np.empty(q.shape[:-1] + (3,))
    rot[..., 0, :, :] = local[..., 0, :, :]
    pos[..., 0, :] = t
    for j in range(1, skeleton.joint_count):
        p = skeleton.parent[j]
        rot[..., j, :, :] = rot[..., p, :, :] @ local[..., j, :, :]
        pos[..., j, :] = pos[..., p, :] + np.einsum("...ij,j->...i", rot[..., p, :, :], skeleton.rest_offset[j])
    return GlobalTransforms(rot, pos)


def skin_vertices(body: BodyModel, transforms: GlobalTransforms, vertex_ids=None) -> np.ndarray:
    """Linear blend skinning; returns (..., V, 3) posed vertex positions.

    Rest rotations are identity, so ``G_j G_j(T)^-1 v = R_j (v - p_j^T) + p_j``.
    """
    mesh = body.mesh
    ids = np.arange(mesh.vertex_count) if vertex_ids is None else np.asarray(vertex_ids)
    joints = mesh.weight_joints[ids]
    w = mesh.weight_values[ids]
    rest = mesh.vertices_rest[ids]
    out = 0.0
    for k in range(2):
        j = joints[:, k]
        local = rest - body.tpose_joint_pos[j]
        moved = np.einsum("...vij,vj->...vi", transforms.rotation[..., j, :, :], local)
        out = out + w[:, k, None] * (moved + transforms.position[..., j, :])
    return out


def nearest_vertex(body: BodyModel, r, tolerance: float = 0.05) -> int:
    """Closest rest vertex to ``r``; ties resolve to the lowest vertex id."""
    r = np.asarray(r, dtype=float)
    lo, hi = body.r_min - tolerance, body.r_max + tolerance
    for axis, name in enumerate("xyz"):
        if not lo[axis] <= r[axis] <= hi[axis]:
            raise ValidationError(
                f"coordinate {name}={r[axis]:.4f} outside body bounds [{lo[axis]:.4f}, {hi[axis]:.4f}]"
            )
    d = np.sum((body.mesh.vertices_rest - r) ** 2, axis=1)
    return int(np.argmin(d))


def region_of_point(body: BodyModel, r) -> int:
    return int(body.mesh.region[nearest_vertex(body, r)])


def tpose_frame() -> PoseFrame:
    q = np.zeros((NUM_JOINTS, 4))
    q[:, 0] = 1.0
    return PoseFrame(q, np.zeros(3))
