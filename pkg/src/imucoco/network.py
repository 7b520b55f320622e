"""Per-joint pathways and the shared pose regressor.

Each of the 24 joint nodes owns its parameters:

* motion feature encoder: ``Linear(9, d_in) -> ReLU -> LSTM x n_mfe``
* coordinate encoder: Fourier features of the standardized placement plus a
  region embedding, then ``depth`` fully connected layers, each emitting
  ``2 * d_h`` values split into a gain and a shift
* modulator: ``depth`` LSTM layers; layer ``l`` sees ``gain_l * z + shift_l``
* five two-layer kinematics heads

The pose regressor maps the 24 node features to 24 global 6D rotations.

Parameter count for a config (H = d_h, P = 6 * n_freq + d_e)::

    per node = 10*d_in + 4*H*(d_in + H + 1) + (n_mfe - 1) * 4*H*(2*H + 1)
             + 24*d_e + 2*H*(P + 1) + (depth - 1) * 2*H*(2*H + 1)
             + depth * 4*H*(2*H + 1)
             + 5*d_kr*(H + 1) + 21*d_kr + 21
    total    = 24 * per node + d_pr*(24*H + 1) + 144*d_pr + 144

Everything is batched over a leading axis: a batch row carries one IMU
track through one node.  When all rows use the same node its tensors are
used directly, otherwise each tensor is stacked per row.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .body import NUM_JOINTS, BodyModel
from .errors import ConfigurationError, ValidationError
from .rotations import sixd_to_matrix
from .vimu import ImuTrack, PlacementCoordinate, encode_channels

KR_HEADS = (
    ("velocity", 3),
    ("position", 3),
    ("local_orientation", 6),
    ("global_orientation", 6),
    ("root_velocity", 3),
)
CHANNELS = 9


@dataclass(frozen=True)
class NetConfig:
    d_in: int = 32
    d_h: int = 64
    d_e: int = 16
    n_freq: int = 6
    n_mfe: int = 1
    depth: int = 2
    d_kr: int = 64
    d_pr: int = 256

    def validate(self) -> "NetConfig":
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"network setting {name} must be a positive integer, got {value!r}")
        return self

    @property
    def code_input_dim(self) -> int:
        return 6 * self.n_freq + self.d_e


def node_param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes of one joint node."""
    h = cfg.d_h
    shapes: dict[str, tuple[int, ...]] = {
        "mfe.in.w": (CHANNELS, cfg.d_in),
        "mfe.in.b": (1, cfg.d_in),
    }
    for k in range(cfg.n_mfe):
        n_in = cfg.d_in if k == 0 else h
        shapes[f"mfe.lstm{k}.w"] = (n_in + h, 4 * h)
        shapes[f"mfe.lstm{k}.b"] = (1, 4 * h)
    shapes["sce.emb"] = (NUM_JOINTS, cfg.d_e)
    for l in range(cfg.depth):
        n_in = cfg.code_input_dim if l == 0 else 2 * h
        shapes[f"sce.fc{l}.w"] = (n_in, 2 * h)
        shapes[f"sce.fc{l}.b"] = (1, 2 * h)
    for l in range(cfg.depth):
        shapes[f"jnm.lstm{l}.w"] = (2 * h, 4 * h)
        shapes[f"jnm.lstm{l}.b"] = (1, 4 * h)
    for name, out in KR_HEADS:
        shapes[f"kr.{name}.w1"] = (h, cfg.d_kr)
        shapes[f"kr.{name}.b1"] = (1, cfg.d_kr)
        shapes[f"kr.{name}.w2"] = (cfg.d_kr, out)
        shapes[f"kr.{name}.b2"] = (1, out)
    return shapes


def pr_param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    return {
        "w1": (NUM_JOINTS * cfg.d_h, cfg.d_pr),
        "b1": (1, cfg.d_pr),
        "w2": (cfg.d_pr, NUM_JOINTS * 6),
        "b2": (1, NUM_JOINTS * 6),
    }


def expected_parameter_count(cfg: NetConfig) -> int:
    """Closed-form count, kept independent of the shape tables."""
    h, p = cfg.d_h, cfg.code_input_dim
    node = (
        10 * cfg.d_in
        + 4 * h * (cfg.d_in + h + 1)
        + (cfg.n_mfe - 1) * 4 * h * (2 * h + 1)
        + 24 * cfg.d_e
        + 2 * h * (p + 1)
        + (cfg.depth - 1) * 2 * h * (2 * h + 1)
        + cfg.depth * 4 * h * (2 * h + 1)
        + 5 * cfg.d_kr * (h + 1)
        + 21 * cfg.d_kr
        + 21
    )
    return NUM_JOINTS * node + cfg.d_pr * (NUM_JOINTS * h + 1) + 144 * cfg.d_pr + 144


class Model:
    """Parameters of all joint nodes plus the pose regressor."""

    def __init__(self, config: NetConfig, nodes: list[dict[str, Tensor]], pr: dict[str, Tensor], body_fingerprint: str):
        self.config = config
        self.nodes = nodes
        self.pr = pr
        self.body_fingerprint = body_fingerprint

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for j, node in enumerate(self.nodes):
            out.extend((f"node{j}.{name}", t) for name, t in node.items())
        out.extend((f"pr.{name}", t) for name, t in self.pr.items())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def kr_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_parameters() if ".kr." in name]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise ValidationError(f"missing parameter {name}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ValidationError(f"parameter {name}: shape {value.shape}, expected {t.shape}")
            t.data = value.copy()

    def copy(self) -> "Model":
        other = init_model(self.config, seed=0, body_fingerprint=self.body_fingerprint)
        other.load_state_arrays(self.state_arrays())
        return other


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: NetConfig, seed: int, body_fingerprint: str = "") -> Model:
    """Fresh parameters; coordinate-encoder gains start near one."""
    config.validate()
    rng = np.random.default_rng(seed)
    h = config.d_h
    nodes = []
    for _ in range(NUM_JOINTS):
        node = {}
        for name, shape in node_param_shapes(config).items():
            if name == "sce.emb":
                value = rng.normal(0.0, 1.0, size=shape)
            elif name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
                value = np.zeros(shape)
                if name.startswith("sce.fc"):
                    value[:, :h] = 1.0
            elif ".lstm" in name:
                value = _uniform(rng, shape, h)
            else:
                value = _uniform(rng, shape, shape[0])
            node[name] = Tensor(value, requires_grad=True, name=name)
        nodes.append(node)
    pr = {}
    for name, shape in pr_param_shapes(config).items():
        value = np.zeros(shape) if name.startswith("b") else _uniform(rng, shape, shape[0])
        pr[name] = Tensor(value, requires_grad=True, name=f"pr.{name}")
    return Model(config, nodes, pr, body_fingerprint)


# ----- placement features -------------------------------------------------


def standardize_coordinate(r, joint: int, body: BodyModel) -> np.ndarray:
    """Placement relative to the joint's T-pose location, scaled by the body span."""
    r = np.asarray(r, dtype=np.float64)
    return (r - body.tpose_joint_pos[joint]) / (body.r_max - body.r_min)


def positional_encode(r_st, n_freq: int) -> np.ndarray:
    """Sine then cosine blocks of ``2*pi*2^p * r`` for p = 0..n_freq-1."""
    if n_freq < 1:
        raise ValidationError(f"n_freq must be >= 1, got {n_freq}")
    r_st = np.asarray(r_st, dtype=np.float64)
    blocks = []
    for p in range(n_freq):
        arg = 2.0 * np.pi * (2.0**p) * r_st
        blocks.append(np.sin(arg))
        blocks.append(np.cos(arg))
    return np.concatenate(blocks, axis=-1)


def placement_features(body: BodyModel, placements: Sequence[PlacementCoordinate], joints, n_freq: int):
    """Fourier features (B, 6*n_freq) and region ids (B,) for batch rows."""
    joints = np.asarray(joints, dtype=int)
    r = np.array([p.r for p in placements], dtype=np.float64).reshape(len(placements), 3)
    regions = np.array([p.region_k for p in placements], dtype=int)
    if np.any((regions < 0) | (regions >= NUM_JOINTS)):
        raise ValidationError(f"placement region must lie in 0..{NUM_JOINTS - 1}, got {regions.tolist()}")
    r_st = (r - body.tpose_joint_pos[joints]) / (body.r_max - body.r_min)
    return positional_encode(r_st, n_freq), regions


# ----- batched node views -------------------------------------------------


def node_view(model: Model, joints) -> dict[str, Tensor]:
    """Parameters for batch rows served by ``joints`` (one joint per row)."""
    joints = [int(j) for j in joints]
    if len(set(joints)) == 1:
        return dict(model.nodes[joints[0]])
    return {name: ad.stack([model.nodes[j][name] for j in joints]) for name in model.nodes[0]}


class LstmState(NamedTuple):
    h: Tensor  # (B, 1, H)
    c: Tensor


def detach_state(states: Sequence[LstmState]) -> list[LstmState]:
    return [LstmState(s.h.detach(), s.c.detach()) for s in states]


def lstm_sequence(weight: Tensor, bias: Tensor, x: Tensor, state: LstmState | None = None):
    """Run an LSTM over (B, T, in); returns (B, T, H) and the final state.

    The input part of the pre-activations is computed for all frames at
    once; the recurrence then adds ``h @ W_h`` frame by frame.
    """
    n_in = x.shape[-1]
    hidden = weight.shape[-1] // 4
    if weight.shape[-2] != n_in + hidden:
        raise ValidationError(f"lstm: weight {weight.shape} does not fit input width {n_in}")
    batch, frames = x.shape[0], x.shape[1]
    w_x = weight[..., :n_in, :]
    w_h = weight[..., n_in:, :]
    x_proj = ad.add(ad.matmul(x, w_x), bias)
    if state is None:
        zeros = np.zeros((batch, 1, hidden))
        h, c = Tensor(zeros), Tensor(zeros)
    else:
        h, c = state
    outputs = []
    for t in range(frames):
        pre = ad.add(x_proj[:, t : t + 1, :], ad.matmul(h, w_h))
        h, c = ad.lstm_gates(pre, c)
        outputs.append(h)
    return ad.concat(outputs, axis=1), LstmState(h, c)


def mfe_forward(view, channels, cfg: NetConfig, states=None):
    """Motion features (B, T, d_h) from calibrated channels (B, T, 9)."""
    channels = ad.as_tensor(channels)
    if channels.ndim != 3 or channels.shape[-1] != CHANNELS:
        raise ValidationError(f"motion encoder expects (B, T, {CHANNELS}) channels, got {channels.shape}")
    x = ad.relu(ad.add(ad.matmul(channels, view["mfe.in.w"]), view["mfe.in.b"]))
    new_states = []
    for k in range(cfg.n_mfe):
        x, st = lstm_sequence(view[f"mfe.lstm{k}.w"], view[f"mfe.lstm{k}.b"], x, None if states is None else states[k])
        new_states.append(st)
    return x, new_states


def sce_forward(view, features: np.ndarray, regions: np.ndarray, cfg: NetConfig) -> list[tuple[Tensor, Tensor]]:
    """Placement codes: one (gain, shift) pair of shape (B, 1, d_h) per modulated layer."""
    emb = view["sce.emb"]
    index = (np.arange(len(regions)), regions) if emb.ndim == 3 else regions
    q = ad.concat([Tensor(features), ad.embedding_lookup(emb, index)], axis=-1)
    q = ad.reshape(q, (q.shape[0], 1, q.shape[-1]))
    codes = []
    h = cfg.d_h
    for l in range(cfg.depth):
        if l > 0:
            q = ad.relu(q)
        q = ad.add(ad.matmul(q, view[f"sce.fc{l}.w"]), view[f"sce.fc{l}.b"])
        codes.append((q[..., :h], q[..., h:]))
    return codes


def jnm_forward(view, h: Tensor, codes, cfg: NetConfig, states=None):
    """Modulated LSTM stack; layer l consumes ``gain_l * z + shift_l``."""
    if len(codes) != cfg.depth:
        raise ValidationError(f"modulator depth {cfg.depth} needs {cfg.depth} code pairs, got {len(codes)}")
    z = h
    new_states = []
    for l, (gain, shift) in enumerate(codes):
        z_in = ad.add(ad.mul(gain, z), shift)
        z, st = lstm_sequence(view[f"jnm.lstm{l}.w"], view[f"jnm.lstm{l}.b"], z_in, None if states is None else states[l])
        new_states.append(st)
    return z, new_states


def kr_forward(view, z: Tensor) -> dict[str, Tensor]:
    out = {}
    for name, _ in KR_HEADS:
        hidden = ad.relu(ad.add(ad.matmul(z, view[f"kr.{name}.w1"]), view[f"kr.{name}.b1"]))
        out[name] = ad.add(ad.matmul(hidden, view[f"kr.{name}.w2"]), view[f"kr.{name}.b2"])
    return out


def pr_forward(pr: dict[str, Tensor], z_nodes) -> Tensor:
    """Global pose (..., T, 144) from node features stacked node-first (24, ..., T, d_h).

    Equivalent to concatenating the 24 features in joint order and applying
    ``W2 relu(W1 x + b1) + b2``; the first product is split per joint block.
    """
    z_nodes = ad.as_tensor(z_nodes)
    if z_nodes.shape[0] != NUM_JOINTS:
        raise ValidationError(f"pose regressor needs {NUM_JOINTS} node features, got {z_nodes.shape[0]}")
    d_h = z_nodes.shape[-1]
    w1 = pr["w1"]
    if w1.shape[0] != NUM_JOINTS * d_h:
        raise ValidationError(f"pose regressor input {NUM_JOINTS}x{d_h} does not match weight {w1.shape}")
    blocks = ad.reshape(w1, (NUM_JOINTS,) + (1,) * (z_nodes.ndim - 3) + (d_h, w1.shape[1]))
    pre = ad.add(ad.sum(ad.matmul(z_nodes, blocks), axis=0), pr["b1"])
    return ad.add(ad.matmul(ad.relu(pre), pr["w2"]), pr["b2"])


def pr_forward_concat(pr: dict[str, Tensor], z_concat) -> Tensor:
    """Pose from an explicit (..., T, 24*d_h) concatenation."""
    hidden = ad.relu(ad.add(ad.matmul(ad.as_tensor(z_concat), pr["w1"]), pr["b1"]))
    return ad.add(ad.matmul(hidden, pr["w2"]), pr["b2"])


class NodeOutput(NamedTuple):
    z: Tensor  # (B, T, d_h)
    preds: dict[str, Tensor]  # each (B, T, k)
    states: list[LstmState]  # motion encoder layers then modulator layers


def forward_nodes(
    model: Model,
    body: BodyModel,
    joints,
    channels,
    placements: Sequence[PlacementCoordinate],
    states=None,
) -> NodeOutput:
    """Run batch row b through node ``joints[b]`` with its own placement."""
    cfg = model.config
    joints = np.asarray(joints, dtype=int).reshape(-1)
    if np.any((joints < 0) | (joints >= NUM_JOINTS)):
        raise ValidationError(f"joint index outside 0..{NUM_JOINTS - 1}")
    if len(placements) != len(joints):
        raise ValidationError(f"{len(joints)} rows but {len(placements)} placements")
    view = node_view(model, joints)
    features, regions = placement_features(body, placements, joints, cfg.n_freq)
    mfe_states = None if states is None else states[: cfg.n_mfe]
    jnm_states = None if states is None else states[cfg.n_mfe :]
    h, s1 = mfe_forward(view, channels, cfg, mfe_states)
    codes = sce_forward(view, features, regions, cfg)
    z, s2 = jnm_forward(view, h, codes, cfg, jnm_states)
    return NodeOutput(z, kr_forward(view, z), s1 + s2)


def node_forward(model: Model, joint: int, track: ImuTrack, body: BodyModel) -> NodeOutput:
    """Single track through one node; outputs keep a leading batch axis of 1."""
    channels = encode_channels(track)[None]
    return forward_nodes(model, body, [joint], channels, [track.placement])


def placement_codes(model: Model, joint: int, placement: PlacementCoordinate, body: BodyModel):
    """Numeric (gain, shift) arrays of shape (d_h,) per modulated layer."""
    features, regions = placement_features(body, [placement], [joint], model.config.n_freq)
    with ad.no_grad():
        codes = sce_forward(model.nodes[joint], features, regions, model.config)
    return [(g.data.reshape(-1), b.data.reshape(-1)) for g, b in codes]


def decode_pose(pose_6d: np.ndarray) -> np.ndarray:
    """(..., 144) 6D output to (..., 24, 3, 3) rotation matrices."""
    pose_6d = np.asarray(pose_6d)
    return sixd_to_matrix(pose_6d.reshape(pose_6d.shape[:-1] + (NUM_JOINTS, 6)))
