"""Two-phase training.

Phase 1 trains every node on its own joint virtual IMU with the kinematic
and full-body pose losses.  Phase 2 feeds sampled mesh virtual IMUs through
each node, keeps the pose loss by substituting the node's feature into a
buffer of joint-IMU features, aligns the mesh feature to the joint feature
of the same frames, and leaves the kinematics heads untouched.

Sequences are cut into truncated back-propagation windows; one optimizer
step consumes one window of one sequence with all 24 nodes batched.  The
recurrent state is carried (detached) from the previous window of the same
sequence.

Batched objective
-----------------
Within a phase-1 window the buffer equals the detached features of the
same forward pass, so ``sum_j kin_j + pose(all live features)`` gives every
node exactly the gradient of its own per-node objective.  The pose
regressor sees the pose gradient once rather than 24 times; Adam's scale
invariance makes the two equivalent up to epsilon.  Phase 2 uses the same
construction, with mesh rows substituted one slot at a time into a buffer
where the slots of lower-numbered nodes already hold their mesh features.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .body import NUM_JOINTS, BodyModel
from .errors import ConfigurationError, ValidationError
from .losses import alignment_loss, joint_targets, kinematic_loss, pose_loss
from .motion import MotionSequence
from .network import Model, detach_state, forward_nodes, node_view, pr_forward
from .vimu import (
    ImuTrack,
    KinematicsGT,
    encode_channels,
    kinematics_ground_truth,
    posed,
    synthesize_joint_imus,
    synthesize_mesh_imus,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda_kinematic: float = 1.0
    lambda_pose: float = 1.0
    lambda_align: float = 0.1
    phase1_steps: int = 200
    phase2_steps: int = 100
    mesh_samples_per_sequence: int = 48
    hop_decay: float = 0.5
    bptt_window: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # stop when the mean loss of the last window of steps improves on the
    # one before by less than this fraction; 0 disables
    plateau_window: int = 50
    plateau_tolerance: float = 0.01

    def validate(self) -> "TrainConfig":
        for name in ("lambda_kinematic", "lambda_pose", "lambda_align", "lr"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")
        for name in ("mesh_samples_per_sequence", "bptt_window"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("phase1_steps", "phase2_steps", "plateau_window"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.hop_decay <= 1.0:
            raise ConfigurationError(f"hop_decay must lie in (0, 1], got {self.hop_decay}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(model: Model, cfg: TrainConfig) -> Adam:
    return Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


# ----- buffer and per-node objective ----------------------------------------


class NodeBuffer:
    """Cached per-node feature sequences used to evaluate the pose loss."""

    JOINT = "joint"
    MESH = "mesh"

    def __init__(self):
        self.slots: list[np.ndarray | None] = [None] * NUM_JOINTS
        self.provenance: list[str | None] = [None] * NUM_JOINTS

    def set(self, joint: int, z, provenance: str) -> None:
        data = z.data if isinstance(z, Tensor) else z
        self.slots[joint] = np.array(data, dtype=np.float64)
        self.provenance[joint] = provenance

    def fill_joint(self, z_nodes) -> None:
        for j in range(NUM_JOINTS):
            self.set(j, np.asarray(z_nodes.data if isinstance(z_nodes, Tensor) else z_nodes)[j], self.JOINT)

    @property
    def is_full(self) -> bool:
        return all(s is not None for s in self.slots)

    def stacked(self) -> np.ndarray:
        missing = [j for j, s in enumerate(self.slots) if s is None]
        if missing:
            raise ValidationError(f"node buffer slots {missing} are unpopulated")
        return np.stack(self.slots)


class NodeLoss(NamedTuple):
    total: Tensor
    kinematic: Tensor
    pose: Tensor
    align: Tensor | None


def total_node_loss(
    model: Model,
    body: BodyModel,
    joint: int,
    track: ImuTrack,
    gt: KinematicsGT,
    buffer: NodeBuffer,
    z_ref,
    cfg: TrainConfig,
) -> NodeLoss:
    """Weighted sum of kinematic, buffered pose and (optional) alignment losses for one node."""
    slots = buffer.stacked()
    channels = encode_channels(track)[None]
    out = forward_nodes(model, body, [joint], channels, [track.placement])
    kin = kinematic_loss(out.preds, joint_targets(gt, [joint]))
    nodes = [out.z[0] if i == joint else Tensor(slots[i]) for i in range(NUM_JOINTS)]
    pose = pose_loss(pr_forward(model.pr, ad.stack(nodes)), gt.pose)
    total = ad.add(ad.scale(kin, cfg.lambda_kinematic), ad.scale(pose, cfg.lambda_pose))
    align = None
    if z_ref is not None:
        align = alignment_loss(out.z[0], z_ref)
        total = ad.add(total, ad.scale(align, cfg.lambda_align))
    return NodeLoss(total, kin, pose, align)


# ----- mesh sampling ----------------------------------------------------------


def sampling_weights(body: BodyModel, joint: int, hop_decay: float = 0.5, density=None) -> np.ndarray:
    """Normalized per-vertex sampling probabilities for one target joint.

    ``density`` defaults to each vertex's share of surface area, which
    makes the draw uniform per unit area regardless of how finely a bone's
    cylinder is tessellated.
    """
    density = body.vertex_area if density is None else np.asarray(density, dtype=np.float64)
    hops = body.skeleton.hops[body.mesh.region, joint]
    w = density * np.power(float(hop_decay), hops)
    return w / w.sum()


def sample_mesh_vertices(body: BodyModel, joint: int, n: int, seed, hop_decay: float = 0.5, density=None) -> np.ndarray:
    """Draw ``n`` distinct vertices, favouring regions few hops from ``joint``."""
    if n < 1:
        raise ValidationError(f"sample count must be >= 1, got {n}")
    p = sampling_weights(body, joint, hop_decay, density)
    available = int(np.count_nonzero(p))
    if n > available:
        log.warning("requested %d vertices but only %d can be drawn; clamping", n, available)
        n = available
    rng = np.random.default_rng(seed)
    return rng.choice(len(p), size=n, replace=False, p=p)


# ----- corpus preparation -------------------------------------------------------


@dataclass
class SequenceData:
    motion: MotionSequence
    channels: np.ndarray  # (24, T, 9) joint IMU channels
    placements: list
    gt: KinematicsGT
    transforms: object = field(repr=False)

    @property
    def frame_count(self) -> int:
        return self.motion.frame_count


def prepare_sequence(body: BodyModel, motion: MotionSequence) -> SequenceData:
    transforms = posed(body, motion)
    tracks = synthesize_joint_imus(body, motion, transforms)
    channels = np.stack([encode_channels(t) for t in tracks])
    return SequenceData(motion, channels, [t.placement for t in tracks], kinematics_ground_truth(body, motion, transforms), transforms)


def prepare_corpus(body: BodyModel, corpus: Sequence[MotionSequence]) -> list[SequenceData]:
    if len(corpus) == 0:
        raise ValidationError("training corpus is empty")
    return [prepare_sequence(body, m) for m in corpus]


def window_schedule(frame_counts: Sequence[int], window: int) -> list[tuple[int, int, int]]:
    """(sequence, start, stop) for every window, sequence by sequence."""
    out = []
    for s, frames in enumerate(frame_counts):
        for start in range(0, frames, window):
            out.append((s, start, min(start + window, frames)))
    return out


# ----- window objectives ----------------------------------------------------------


class WindowLoss(NamedTuple):
    objective: Tensor
    kinematic: float
    pose: float
    align: float
    states: list


def phase1_window(model: Model, body: BodyModel, seq: SequenceData, start: int, stop: int, cfg: TrainConfig, states=None) -> WindowLoss:
    joints = np.arange(NUM_JOINTS)
    out = forward_nodes(model, body, joints, seq.channels[:, start:stop], seq.placements, states)
    kin = kinematic_loss(out.preds, joint_targets(seq.gt, joints, start, stop))
    pose = pose_loss(pr_forward(model.pr, out.z), seq.gt.pose[start:stop])
    objective = ad.add(ad.scale(kin, cfg.lambda_kinematic * NUM_JOINTS), ad.scale(pose, cfg.lambda_pose))
    return WindowLoss(objective, kin.item(), pose.item(), 0.0, detach_state(out.states))


def reported_loss(w: WindowLoss, cfg: TrainConfig) -> float:
    """Per-node objective averaged over nodes."""
    return cfg.lambda_kinematic * w.kinematic + cfg.lambda_pose * w.pose + cfg.lambda_align * w.align


@dataclass
class MeshSamples:
    vertex_ids: np.ndarray  # (24, n) per target joint
    channels: np.ndarray  # (24 * n, T, 9), node-major
    placements: list

    @property
    def per_node(self) -> int:
        return self.vertex_ids.shape[1]


def draw_mesh_samples(body: BodyModel, seq: SequenceData, per_node: int, seed, hop_decay: float) -> MeshSamples:
    ids = np.stack([sample_mesh_vertices(body, j, per_node, (*np.atleast_1d(seed), j), hop_decay) for j in range(NUM_JOINTS)])
    tracks = synthesize_mesh_imus(body, seq.motion, ids.reshape(-1), seq.transforms)
    return MeshSamples(ids, np.stack([encode_channels(t) for t in tracks]), [t.placement for t in tracks])


def _substitution_inputs(buffer: np.ndarray, mesh_last: np.ndarray, row_joint: np.ndarray):
    """Constant PR inputs (24, B, T, H) and gather indices for the live rows.

    Row ``b`` serves node ``j = row_joint[b]``: slots below ``j`` hold the
    mesh features already produced this step, slots above hold joint
    features, slot ``j`` is left zero for the live feature.
    """
    rows = len(row_joint)
    const = np.repeat(buffer[:, None], rows, axis=1)
    for i in range(NUM_JOINTS):
        later = row_joint > i
        const[i, later] = mesh_last[i]
    const[row_joint, np.arange(rows)] = 0.0
    index = np.full((NUM_JOINTS, rows), rows, dtype=int)
    index[row_joint, np.arange(rows)] = np.arange(rows)
    return const, index


def phase2_window(
    model: Model,
    body: BodyModel,
    seq: SequenceData,
    mesh: MeshSamples,
    start: int,
    stop: int,
    cfg: TrainConfig,
    states=None,
) -> WindowLoss:
    n = mesh.per_node
    row_joint = np.repeat(np.arange(NUM_JOINTS), n)
    joints = np.concatenate([np.arange(NUM_JOINTS), row_joint])
    channels = np.concatenate([seq.channels[:, start:stop], mesh.channels[:, start:stop]])
    out = forward_nodes(model, body, joints, channels, list(seq.placements) + list(mesh.placements), states)
    targets = joint_targets(seq.gt, joints, start, stop)
    head = slice(0, NUM_JOINTS)
    tail = slice(NUM_JOINTS, None)
    kin_joint = kinematic_loss({k: v[head] for k, v in out.preds.items()}, {k: v[head] for k, v in targets.items()})
    kin_mesh = kinematic_loss({k: v[tail] for k, v in out.preds.items()}, {k: v[tail] for k, v in targets.items()})
    z_joint = out.z[head]
    z_mesh = out.z[tail]
    gt_pose = seq.gt.pose[start:stop]
    pose_joint = pose_loss(pr_forward(model.pr, z_joint), gt_pose)

    buffer = NodeBuffer()
    buffer.fill_joint(z_joint.data)
    z_ref = buffer.stacked()
    mesh_last = z_mesh.data[n - 1 :: n]
    const, index = _substitution_inputs(z_ref, mesh_last, row_joint)
    padded = ad.concat([z_mesh, Tensor(np.zeros((1,) + z_mesh.shape[1:]))], axis=0)
    pr_in = ad.add(Tensor(const), ad.getitem(padded, index))
    pose_mesh = pose_loss(pr_forward(model.pr, pr_in), np.broadcast_to(gt_pose, (len(row_joint),) + gt_pose.shape))
    align = alignment_loss(z_mesh, z_ref[row_joint])

    per_node = ad.add(
        ad.add(ad.scale(kin_mesh, cfg.lambda_kinematic), ad.scale(pose_mesh, cfg.lambda_pose)),
        ad.scale(align, cfg.lambda_align),
    )
    objective = ad.add(
        ad.add(ad.scale(per_node, NUM_JOINTS), ad.scale(kin_joint, cfg.lambda_kinematic * NUM_JOINTS)),
        ad.scale(pose_joint, cfg.lambda_pose),
    )
    return WindowLoss(objective, kin_mesh.item(), pose_mesh.item(), align.item(), detach_state(out.states))


# ----- training loops ------------------------------------------------------------


@dataclass
class TrainResult:
    steps: int
    log: list[tuple[int, float, float, float]]
    optimizer: Adam
    stopped_early: bool = False


def _plateaued(losses: list[float], cfg: TrainConfig) -> bool:
    w = cfg.plateau_window
    if w <= 0 or len(losses) < 2 * w:
        return False
    before = float(np.mean(losses[-2 * w : -w]))
    after = float(np.mean(losses[-w:]))
    return before <= 0 or (before - after) / before < cfg.plateau_tolerance


def train_phase1(
    model: Model,
    body: BodyModel,
    corpus: Sequence[MotionSequence],
    cfg: TrainConfig,
    optimizer: Adam | None = None,
    start_step: int = 0,
    data: list[SequenceData] | None = None,
) -> TrainResult:
    """Joint-IMU training for ``cfg.phase1_steps`` windows (or until plateau)."""
    cfg.validate()
    data = prepare_corpus(body, corpus) if data is None else data
    optimizer = make_optimizer(model, cfg) if optimizer is None else optimizer
    schedule = window_schedule([d.frame_count for d in data], cfg.bptt_window)
    rows, totals = [], []
    states = None
    stopped = False
    for k in range(cfg.phase1_steps):
        step = start_step + k
        s, a, b = schedule[step % len(schedule)]
        w = phase1_window(model, body, data[s], a, b, cfg, states if a > 0 else None)
        optimizer.zero_grad()
        ad.backward(w.objective)
        optimizer.step()
        states = w.states
        rows.append((step, w.kinematic, w.pose, w.align))
        totals.append(reported_loss(w, cfg))
        if _plateaued(totals, cfg):
            log.info("phase 1 plateaued at step %d", step)
            stopped = True
            break
    return TrainResult(len(rows), rows, optimizer, stopped)


def train_phase2(
    model: Model,
    body: BodyModel,
    corpus: Sequence[MotionSequence],
    cfg: TrainConfig,
    optimizer: Adam | None = None,
    start_step: int = 0,
    data: list[SequenceData] | None = None,
) -> TrainResult:
    """Mesh-IMU training with the kinematics heads frozen."""
    cfg.validate()
    data = prepare_corpus(body, corpus) if data is None else data
    optimizer = make_optimizer(model, cfg) if optimizer is None else optimizer
    per_node = max(1, cfg.mesh_samples_per_sequence // NUM_JOINTS)
    samples = [draw_mesh_samples(body, d, per_node, (cfg.seed, s), cfg.hop_decay) for s, d in enumerate(data)]
    frozen = {id(t) for t in model.kr_parameters()}
    schedule = window_schedule([d.frame_count for d in data], cfg.bptt_window)
    rows = []
    states = None
    for k in range(cfg.phase2_steps):
        step = start_step + k
        s, a, b = schedule[step % len(schedule)]
        w = phase2_window(model, body, data[s], samples[s], a, b, cfg, states if a > 0 else None)
        optimizer.zero_grad()
        ad.backward(w.objective)
        optimizer.step(frozen=frozen)
        states = w.states
        rows.append((step, w.kinematic, w.pose, w.align))
    return TrainResult(len(rows), rows, optimizer)


def format_loss_log(rows) -> str:
    return "".join(f"{step} {kin:.10g} {pose:.10g} {align:.10g}\n" for step, kin, pose, align in rows)


# ----- evaluation helpers ------------------------------------------------------------


def evaluate_phase1_loss(model: Model, body: BodyModel, data: list[SequenceData], cfg: TrainConfig) -> float:
    """Mean reported phase-1 loss over every window of the corpus."""
    values = []
    states = None
    with ad.no_grad():
        for s, a, b in window_schedule([d.frame_count for d in data], cfg.bptt_window):
            w = phase1_window(model, body, data[s], a, b, cfg, states if a > 0 else None)
            states = w.states
            values.append(reported_loss(w, cfg))
    return float(np.mean(values))


def node_features(model: Model, body: BodyModel, joints, channels, placements) -> np.ndarray:
    """Full-length features (B, T, d_h) without recording a graph."""
    with ad.no_grad():
        return forward_nodes(model, body, joints, channels, placements).z.data


def evaluate_alignment(model: Model, body: BodyModel, data: list[SequenceData], per_node: int, seed, hop_decay: float = 0.5) -> float:
    """Mean alignment loss of sampled mesh IMUs against each node's joint-IMU feature."""
    values = []
    with ad.no_grad():
        for s, seq in enumerate(data):
            mesh = draw_mesh_samples(body, seq, per_node, (*np.atleast_1d(seed), s), hop_decay)
            z_ref = node_features(model, body, np.arange(NUM_JOINTS), seq.channels, seq.placements)
            row_joint = np.repeat(np.arange(NUM_JOINTS), per_node)
            z = node_features(model, body, row_joint, mesh.channels, mesh.placements)
            values.append(alignment_loss(z, z_ref[row_joint]).item())
    return float(np.mean(values))
